"""Finite-difference suite over every loss plus an end-to-end model probe.

Losses are looked up on the module at call time so a test can swap one out
and watch the suite catch it.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .data import DomainBatch, pose_quaternion
from .model import DsnModel, build_desk_topology, compute_losses, forward, without_reversal
from .tensor import Tensor

LOSS_NAMES = ("task_nll", "si_mse", "recon", "difference", "dann", "mmd", "correg", "pose")
LOSS_THRESHOLD = 1e-4
PROBE_THRESHOLD = 1e-3


def loss_cases(rng: np.random.Generator):
    """(name, fn, input shapes) for one random draw of small inputs."""
    n, d = 4, 3
    onehot = np.eye(d)[rng.integers(0, d, n)]
    yield "task_nll", lambda a: L.task_nll(T.softmax(a), onehot), [(n, d)]
    yield "si_mse", lambda a, b: L.si_mse(a, b), [(n, 2, 2, 3), (n, 2, 2, 3)]
    yield "recon", lambda a, b, c, e: L.reconstruction_loss((a, b), (c, e)), [(n, 5)] * 4
    yield "difference", lambda a, b, c, e: L.difference_loss(a, b, c, e), [(n, d), (n, d), (n + 1, d), (n + 1, d)]
    labels = (rng.uniform(size=(n, 1)) > 0.5).astype(float)
    yield "dann", lambda a: L.dann_domain_loss(T.sigmoid(a), labels), [(n, 1)]
    yield "mmd", lambda a, b: L.mmd_loss(a, b), [(n, d), (n + 1, d)]
    yield "correg", lambda a, b: L.correg_loss(a, b), [(n, d), (n + 1, d)]
    # a random unit target keeps |q.q_hat| well away from the clamp
    q = L.normalize_quaternions(rng.normal(size=(n, 4))).data
    yield "pose", lambda a: L.pose_term(q, a, 0.7), [(n, 4)]


def check_trial(trial: int, epsilon: float = 1e-5) -> dict[str, float]:
    rng = np.random.default_rng(1000 + trial)
    out = {}
    for name, fn, shapes in loss_cases(rng):
        ps = [Tensor(rng.uniform(-2, 2, size=s), requires_grad=True, name=f"{name}{i}")
              for i, s in enumerate(shapes)]
        out[name] = T.finite_difference_check(lambda: fn(*ps), ps, epsilon).max_rel_error
    return out


def _probe_batch(scenario: str, n: int = 4, seed: int = 3) -> DomainBatch:
    rng = np.random.default_rng(seed)
    shape, c = ((2,), 3) if scenario == "blobs2d" else ((16, 16, 3), 5 if scenario == "pose_glyph" else 10)
    pose = pose_quaternion(rng.uniform(-180, 180, n)) if scenario == "pose_glyph" else None
    return DomainBatch(rng.uniform(-1, 1, (n,) + shape), np.eye(c)[rng.integers(0, c, n)],
                       rng.uniform(-1, 1, (n,) + shape), pose)


def end_to_end_probe(scenario: str = "glyph16", similarity: str = "dann", probe: int = 5,
                     seed: int = 7) -> T.GradcheckReport:
    """Probe ``probe`` entries of every parameter tensor of a full DSN.

    The domain classifier runs without its reversal layer so that backward
    is the true derivative of the total loss.
    """
    model = DsnModel(scenario, "dsn", similarity, seed=seed,
                     topology=without_reversal(build_desk_topology(scenario)))
    batch = _probe_batch(scenario)
    w = L.LossWeights(alpha=0.3, beta=0.2, gamma=0.5, xi=0.125, warmup_steps=0)

    def total():
        out = forward(model, batch)
        return L.total_loss(compute_losses(model, out, batch, w), w, 1)

    return T.finite_difference_check(total, model.params.tensors(), 1e-5, probe=probe,
                                     rng=np.random.default_rng(0))


@dataclass
class SuiteReport:
    worst: dict[str, float] = field(default_factory=dict)
    worst_trial: dict[str, int] = field(default_factory=dict)
    probe: float = 0.0
    probe_leaf: str | None = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(v < LOSS_THRESHOLD for v in self.worst.values()) and self.probe < PROBE_THRESHOLD

    def lines(self) -> list[str]:
        rows = []
        for name in LOSS_NAMES:
            v = self.worst[name]
            flag = "ok" if v < LOSS_THRESHOLD else "FAIL"
            rows.append(f"{name:<12} {v:.3e}  (trial {self.worst_trial[name]})  {flag}")
        flag = "ok" if self.probe < PROBE_THRESHOLD else "FAIL"
        rows.append(f"{'end_to_end':<12} {self.probe:.3e}  ({self.probe_leaf})  {flag}")
        return rows


def run_suite(trials: int = 20) -> SuiteReport:
    t0 = time.perf_counter()
    rep = SuiteReport(worst={k: 0.0 for k in LOSS_NAMES}, worst_trial={k: 0 for k in LOSS_NAMES})
    for trial in range(trials):
        for name, err in check_trial(trial).items():
            if err >= rep.worst[name]:
                rep.worst[name], rep.worst_trial[name] = err, trial
    probe = end_to_end_probe()
    rep.probe, rep.probe_leaf = probe.max_rel_error, probe.leaf
    rep.seconds = time.perf_counter() - t0
    return rep
