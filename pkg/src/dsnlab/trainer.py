"""SGD with classical momentum, step-decay learning rate, and the training
loop with warmup-gated adaptation losses."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import data as D
from . import layers as Ly
from . import losses as L
from . import tensor as T
from .model import DsnModel, compute_losses, forward, predict
from .tensor import ShapeError, Tensor

CSV_HEADER = ("step", "lr", "l_task", "l_recon", "l_diff", "l_sim", "src_acc", "tgt_acc", "angle_err")


class NumericalError(RuntimeError):
    def __init__(self, step: int, last: "TrainRecord | None"):
        super().__init__(f"non-finite loss at step {step}; last finite record: {last}")
        self.step = step
        self.last = last


@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.9
    decay_interval: int = 1000
    step: int = 0
    velocity: dict = field(default_factory=dict)


def lr_schedule(initial_lr: float, step: int, factor: float = 0.9, interval: int = 20000) -> float:
    if interval <= 0:
        raise ValueError("decay interval must be positive")
    return initial_lr * factor ** (step // interval)


def sgd_momentum_step(params: Sequence[Tensor], grads, state: OptimizerState) -> OptimizerState:
    """v <- mu v + g; p <- p - lr v, in place, at the scheduled rate."""
    lr = lr_schedule(state.lr, state.step, state.decay_factor, state.decay_interval)
    for p in params:
        g = grads[p]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.name} {p.shape}")
        v = state.velocity.get(p.name)
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[p.name] = v
        p.data -= lr * v
    state.step += 1
    return state


@dataclass
class TrainConfig:
    scenario: str = "glyph16"
    variant: str = "dsn"
    similarity: str = "dann"
    recon: str = "si_mse"
    alpha: float = 0.05
    beta: float = 0.05
    gamma: float = 0.25
    xi: float = 0.125
    warmup_steps: int = 500
    lr: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.9
    decay_interval: int = 1000
    batch_size: int = 32
    steps: int = 3000
    eval_interval: int = 500
    n_train: int = 5000
    n_eval: int = 1000
    seed: int = 0

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.alpha, self.beta, self.gamma, self.xi, self.warmup_steps)

    def scenario_spec(self) -> D.ScenarioSpec:
        return D.default_spec(self.scenario, n_train=self.n_train, n_eval=self.n_eval, seed=self.seed)


@dataclass
class TrainRecord:
    step: int
    lr: float
    l_task: float
    l_recon: float = math.nan
    l_diff: float = math.nan
    l_sim: float = math.nan
    l_total: float = math.nan
    src_acc: float = math.nan
    tgt_acc: float = math.nan
    angle_err: float = math.nan

    def csv_row(self) -> str:
        def fmt(v):
            if isinstance(v, int):
                return str(v)
            return "" if math.isnan(v) else repr(float(v))
        return ",".join(fmt(getattr(self, k)) for k in CSV_HEADER)


@dataclass
class TrainResult:
    model: DsnModel
    records: list[TrainRecord]
    state: OptimizerState

    @property
    def final(self) -> TrainRecord:
        return next(r for r in reversed(self.records) if not math.isnan(r.tgt_acc))


def evaluate(model: DsnModel, dataset: D.DomainSet) -> dict:
    """Classification accuracy and, for pose models, mean angle error."""
    probs, quats = predict(model, dataset.images)
    out = {"accuracy": float(np.mean(probs.argmax(axis=1) == dataset.labels))}
    if quats is not None and dataset.poses is not None:
        out["angle_error"] = L.mean_angle_error(dataset.poses, quats)
    return out


def _val(t: Tensor | None) -> float:
    return math.nan if t is None else t.item()


def train(config: TrainConfig, pair: D.DomainPair | None = None,
          metrics_path: str | Path | None = None,
          on_record: Callable[[TrainRecord], None] | None = None) -> TrainResult:
    """Run ``config.steps`` optimisation steps and return every record.

    Each step records the unweighted value of every loss component; the
    total includes adaptation terms only from ``warmup_steps`` on.
    """
    pair = pair or D.generate(config.scenario_spec())
    model = DsnModel(config.scenario, config.variant, config.similarity, seed=config.seed)
    weights = config.weights
    state = OptimizerState(config.lr, config.momentum, config.decay_factor, config.decay_interval)
    params = model.params.tensors()
    if config.variant == "target_only":
        stream = D.batch_iterator(pair.target_train, pair.target_train, config.batch_size, config.seed)
    else:
        stream = D.batch_iterator(pair.source_train, pair.target_train, config.batch_size, config.seed)

    csv = None
    if metrics_path is not None:
        csv = open(metrics_path, "w")
        csv.write(",".join(CSV_HEADER) + "\n")
    records: list[TrainRecord] = []
    last: TrainRecord | None = None
    try:
        for step, batch in zip(range(config.steps), stream):
            T.new_graph()
            # overflow surfaces as a non-finite total below
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                out = forward(model, batch, step)
                parts = compute_losses(model, out, batch, weights, config.recon)
                total = L.total_loss(parts, weights, step)
            rec = TrainRecord(step, lr_schedule(config.lr, step, config.decay_factor, config.decay_interval),
                              parts.task.item(), _val(parts.recon), _val(parts.difference),
                              _val(parts.similarity), total.item())
            if not np.isfinite(rec.l_total):
                raise NumericalError(step, last)
            grads = T.backward(total, params)
            sgd_momentum_step(params, grads, state)
            if (step + 1) % config.eval_interval == 0 or step + 1 == config.steps:
                src = evaluate(model, pair.source_eval)
                tgt = evaluate(model, pair.target_eval)
                rec.src_acc, rec.tgt_acc = src["accuracy"], tgt["accuracy"]
                rec.angle_err = tgt.get("angle_error", math.nan)
            records.append(rec)
            last = rec
            if csv is not None:
                csv.write(rec.csv_row() + "\n")
            if on_record is not None:
                on_record(rec)
    finally:
        if csv is not None:
            csv.close()
    return TrainResult(model, records, state)
