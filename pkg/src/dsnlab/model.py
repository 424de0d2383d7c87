"""Domain Separation Network assembly and baseline variants.

Shared encoder E_c, per-domain private encoders E_p^s / E_p^t, shared
decoder D on the sum of shared and private codes, task head G on the
shared code, and a domain classifier Z behind a gradient reversal layer.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import layers as Ly
from . import losses as L
from . import tensor as T
from .data import DomainBatch
from .layers import ParameterSet, Stack
from .tensor import ShapeError, Tensor

VARIANTS = ("dsn", "source_only", "target_only", "dann_only", "mmd_only", "correg_only")
SIMILARITIES = ("dann", "mmd", "correg", "none")

_BASELINE_SIMILARITY = {"source_only": "none", "target_only": "none", "dann_only": "dann",
                        "mmd_only": "mmd", "correg_only": "correg"}


@dataclass(frozen=True)
class Topology:
    input_shape: tuple[int, ...]
    n_classes: int
    shared: list
    private: list
    decoder: list
    task: list
    domain: list
    pose: bool = False
    task_trunk: list | None = None


def build_desk_topology(scenario: str) -> Topology:
    """Scaled-down layer stacks for each scenario."""
    if scenario in ("glyph16", "pose_glyph"):
        shared = [Ly.conv(3, 3, 3, 8), Ly.RELU, Ly.MAXPOOL, Ly.conv(3, 3, 8, 16), Ly.RELU,
                  Ly.MAXPOOL, Ly.FLATTEN, Ly.dense(64)]
        private = [Ly.conv(3, 3, 3, 8), Ly.RELU, Ly.MAXPOOL, Ly.FLATTEN, Ly.dense(64)]
        decoder = [Ly.dense(4 * 4 * 16), Ly.RELU, Ly.reshape(4, 4, 16),
                   Ly.conv(3, 3, 16, 16), Ly.RELU, Ly.UPSAMPLE,
                   Ly.conv(3, 3, 16, 16), Ly.RELU, Ly.UPSAMPLE,
                   Ly.conv(3, 3, 16, 3)]
        domain = [Ly.GRL, Ly.dense(32), Ly.RELU, Ly.dense(1), Ly.SIGMOID]
        if scenario == "glyph16":
            return Topology((16, 16, 3), 10, shared, private, decoder,
                            [Ly.dense(10), Ly.SOFTMAX], domain)
        return Topology((16, 16, 3), 5, shared, private, decoder,
                        [Ly.dense(5), Ly.SOFTMAX], domain, pose=True,
                        task_trunk=[Ly.dense(64), Ly.RELU])
    if scenario == "blobs2d":
        shared = [Ly.dense(16), Ly.RELU, Ly.dense(8)]
        private = [Ly.dense(16), Ly.RELU, Ly.dense(8)]
        decoder = [Ly.dense(16), Ly.RELU, Ly.dense(2)]
        domain = [Ly.GRL, Ly.dense(8), Ly.RELU, Ly.dense(1), Ly.SIGMOID]
        return Topology((2,), 3, shared, private, decoder, [Ly.dense(3), Ly.SOFTMAX], domain)
    raise ValueError(f"unknown scenario {scenario!r}")


def without_reversal(topo: Topology) -> Topology:
    """Same topology with the GRL dropped from the domain classifier.

    Through the GRL the encoder gradient is not the derivative of the total
    loss, so finite-difference probes run on this reference network.
    """
    return replace(topo, domain=[s for s in topo.domain if s.kind != "grl"])


class DsnModel:
    """Layer stacks plus their parameter groups for one variant."""

    def __init__(self, scenario: str, variant: str = "dsn", similarity: str = "dann",
                 seed: int = 0, topology: Topology | None = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if variant != "dsn":
            similarity = _BASELINE_SIMILARITY[variant]
        if similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {similarity!r}")
        self.scenario, self.variant, self.similarity = scenario, variant, similarity
        topo = topology or build_desk_topology(scenario)
        self.topology = topo
        self.has_private = variant == "dsn"
        self.has_domain = similarity == "dann"

        self.shared = Stack("shared", topo.shared, topo.input_shape)
        code = self.shared.out_shape
        groups: dict[str, list[Stack]] = {"shared": [self.shared]}
        if self.has_private:
            self.private_source = Stack("private_source", topo.private, topo.input_shape)
            self.private_target = Stack("private_target", topo.private, topo.input_shape)
            if self.private_source.out_shape != code:
                raise ShapeError(f"private code {self.private_source.out_shape} != shared code {code}")
            self.decoder = Stack("decoder", topo.decoder, code)
            if self.decoder.out_shape != topo.input_shape:
                raise ShapeError(f"decoder emits {self.decoder.out_shape}, input is {topo.input_shape}")
            groups["private_source"] = [self.private_source]
            groups["private_target"] = [self.private_target]
            groups["decoder"] = [self.decoder]
        task_in = code
        task_stacks = []
        self.task_trunk = None
        if topo.task_trunk:
            self.task_trunk = Stack("task_trunk", topo.task_trunk, code)
            task_in = self.task_trunk.out_shape
            task_stacks.append(self.task_trunk)
        self.task = Stack("task", topo.task, task_in)
        task_stacks.append(self.task)
        self.pose_head = None
        if topo.pose:
            self.pose_head = Stack("pose", [Ly.dense(4)], task_in)
            task_stacks.append(self.pose_head)
        groups["task"] = task_stacks
        if self.has_domain:
            self.domain = Stack("domain", topo.domain, code)
            groups["domain"] = [self.domain]
        self.params: ParameterSet = Ly.init_parameters(groups, seed)

    @property
    def pose(self) -> bool:
        return self.pose_head is not None

    def n_parameters(self) -> int:
        return self.params.n_parameters()

    def closed_form_count(self) -> int:
        total = 0
        for stacks in self.params.groups.values():
            for st in stacks:
                total += Ly.count_parameters(st.specs, st.in_shape)
        return total

    def private(self, domain: int) -> Stack:
        return self.private_source if domain == 0 else self.private_target

    def heads(self, hc: Tensor) -> tuple[Tensor, Tensor | None]:
        z = self.task_trunk(hc) if self.task_trunk is not None else hc
        y = self.task(z)
        q = self.pose_head(z) if self.pose_head is not None else None
        return y, q


@dataclass
class ForwardOutputs:
    hc_s: Tensor
    yhat_s: Tensor
    hc_t: Tensor | None = None
    hp_s: Tensor | None = None
    hp_t: Tensor | None = None
    xhat_s: Tensor | None = None
    xhat_t: Tensor | None = None
    qhat_s: Tensor | None = None
    dhat: Tensor | None = None


def forward(model: DsnModel, batch: DomainBatch, step: int = 0) -> ForwardOutputs:
    """Record one training forward pass on the active graph.

    ``step`` is accepted for symmetry with the loss schedule; the forward
    computation itself does not depend on it.
    """
    xs, xt = batch.source_x, batch.target_x
    if tuple(xs.shape[1:]) != model.topology.input_shape:
        raise ShapeError(f"forward: batch images {xs.shape[1:]} do not match model input "
                         f"{model.topology.input_shape}")
    ns = len(xs)
    needs_target = model.variant not in ("source_only", "target_only")
    if needs_target:
        hc = model.shared(np.concatenate([xs, xt]))
        hc_s, hc_t = hc[:ns], hc[ns:]
    else:
        hc = hc_s = model.shared(xs)
        hc_t = None
    yhat, qhat = model.heads(hc_s)
    out = ForwardOutputs(hc_s=hc_s, yhat_s=yhat, hc_t=hc_t, qhat_s=qhat)
    if model.has_private:
        out.hp_s = model.private_source(xs)
        out.hp_t = model.private_target(xt)
        xhat = model.decoder(T.concat([hc_s + out.hp_s, hc_t + out.hp_t], axis=0))
        out.xhat_s, out.xhat_t = xhat[:ns], xhat[ns:]
    if model.has_domain:
        out.dhat = model.domain(hc)
    return out


def compute_losses(model: DsnModel, out: ForwardOutputs, batch: DomainBatch,
                   weights: L.LossWeights, recon: str = "si_mse",
                   kernel: L.KernelSpec | None = None) -> L.LossParts:
    if model.pose:
        task = L.pose_task_loss(out.yhat_s, batch.source_y, batch.source_pose, out.qhat_s, weights.xi)
    else:
        task = L.task_nll(out.yhat_s, batch.source_y)
    parts = L.LossParts(task=task)
    if model.has_private:
        parts.recon = L.reconstruction_loss((batch.source_x, out.xhat_s), (batch.target_x, out.xhat_t),
                                            scale_invariant=(recon == "si_mse"))
        parts.difference = L.difference_loss(out.hc_s, out.hp_s, out.hc_t, out.hp_t)
    if model.similarity == "dann":
        parts.similarity = L.dann_domain_loss(out.dhat, batch.domain_labels)
    elif model.similarity == "mmd":
        parts.similarity = L.mmd_loss(out.hc_s, out.hc_t, kernel)
    elif model.similarity == "correg":
        parts.similarity = L.correg_loss(out.hc_s, out.hc_t)
    return parts


def decode_partial(model: DsnModel, x: np.ndarray, domain: int, mode: str = "combined") -> Tensor:
    """D(E_c(x)), D(E_p(x)) or D(E_c(x) + E_p(x)) with the domain's private encoder."""
    if not model.has_private:
        raise ValueError(f"variant {model.variant} has no decoder")
    if mode == "shared_only":
        code = model.shared(x)
    elif mode == "private_only":
        code = model.private(domain)(x)
    elif mode == "combined":
        code = model.shared(x) + model.private(domain)(x)
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    return model.decoder(code)


def predict(model: DsnModel, x: np.ndarray, chunk: int = 500) -> tuple[np.ndarray, np.ndarray | None]:
    """Class probabilities and (for pose models) normalised quaternions."""
    ys, qs = [], []
    with T.no_grad():
        for i in range(0, len(x), chunk):
            y, q = model.heads(model.shared(x[i:i + chunk]))
            ys.append(y.data)
            if q is not None:
                qs.append(L.normalize_quaternions(q).data)
    return np.concatenate(ys), (np.concatenate(qs) if qs else None)
