"""Training losses. Each one is built from tensor primitives and so is
differentiable on the active graph."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LOG_FLOOR = 1e-12
POSE_FLOOR = 1e-6

# standard deviations of the 19-kernel multi-RBF mixture
DEFAULT_BANDWIDTHS = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 5.0, 10.0, 15.0, 20.0,
                      25.0, 30.0, 35.0, 100.0, 1e3, 1e4, 1e5, 1e6)


@dataclass(frozen=True)
class KernelSpec:
    bandwidths: tuple[float, ...] = DEFAULT_BANDWIDTHS
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.weights:
            object.__setattr__(self, "weights", (1.0,) * len(self.bandwidths))
        if len(self.weights) != len(self.bandwidths):
            raise ValueError("kernel bandwidths and weights differ in length")
        if any(s <= 0 for s in self.bandwidths):
            raise ValueError("kernel bandwidths must be positive")
        if any(w < 0 for w in self.weights) or not any(w > 0 for w in self.weights):
            raise ValueError("kernel weights must be nonnegative with at least one positive")


@dataclass
class LossWeights:
    alpha: float = 0.05   # reconstruction
    beta: float = 0.05    # difference
    gamma: float = 0.25   # similarity
    xi: float = 0.125     # pose
    warmup_steps: int = 500

    def __post_init__(self):
        for k in ("alpha", "beta", "gamma", "xi"):
            v = getattr(self, k)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def task_nll(pred: Tensor, labels) -> Tensor:
    """Batch-mean cross entropy of softmax rows against one-hot labels."""
    labels = T.as_tensor(labels)
    _check_same("task_nll", pred, labels)
    logp = T.log(T.clamp_min(pred, LOG_FLOOR))
    return T.scale(T.sum(labels * logp), -1.0 / pred.shape[0])


def si_mse(x, x_hat, scale_invariant: bool = True) -> Tensor:
    """Scale-invariant MSE per sample, averaged over the batch.

    k is the element count of one sample. With ``scale_invariant=False``
    the squared-mean correction is dropped, giving plain MSE.
    """
    x, x_hat = T.as_tensor(x), T.as_tensor(x_hat)
    _check_same("si_mse", x, x_hat)
    n = x.shape[0]
    diff = T.reshape(x - x_hat, (n, -1))
    k = diff.shape[1]
    per = T.scale(T.sum(T.square(diff), axis=1), 1.0 / k)
    if scale_invariant:
        per = per - T.scale(T.square(T.sum(diff, axis=1)), 1.0 / k ** 2)
    return T.mean(per)


def mse(x, x_hat) -> Tensor:
    return si_mse(x, x_hat, scale_invariant=False)


def reconstruction_loss(source: tuple, target: tuple, scale_invariant: bool = True) -> Tensor:
    (xs, xs_hat), (xt, xt_hat) = source, target
    return si_mse(xs, xs_hat, scale_invariant) + si_mse(xt, xt_hat, scale_invariant)


def l2_normalize_rows(h: Tensor, eps: float = 1e-12) -> Tensor:
    norm = T.sqrt(T.shift(T.sum(T.square(h), axis=1, keepdims=True), eps))
    return h / norm


def _prep(h: Tensor, normalize: bool) -> Tensor:
    return l2_normalize_rows(h) if normalize else h


def _frob2(m: Tensor) -> Tensor:
    return T.sum(T.square(m))


def difference_loss(hc_s, hp_s, hc_t=None, hp_t=None, normalize: bool = True) -> Tensor:
    """Soft subspace orthogonality: ||Hc^T Hp||_F^2 summed over domains.

    With ``normalize`` (the default) rows are L2-normalised and the product
    is divided by the batch size, bounding each domain's term by 1. Pass
    only the first pair to evaluate a single domain.
    """
    pairs = [(hc_s, hp_s)] + ([(hc_t, hp_t)] if hc_t is not None else [])
    total = None
    for hc, hp in pairs:
        hc, hp = T.as_tensor(hc), T.as_tensor(hp)
        if hc.ndim != 2 or hp.ndim != 2 or hc.shape[0] != hp.shape[0]:
            raise ShapeError(f"difference_loss: shape mismatch {hc.shape} vs {hp.shape}")
        prod = T.matmul(T.transpose(_prep(hc, normalize)), _prep(hp, normalize))
        term = _frob2(T.scale(prod, 1.0 / hc.shape[0]) if normalize else prod)
        total = term if total is None else total + term
    return total


def dann_domain_loss(d_hat, d) -> Tensor:
    """Mean binary cross entropy of domain predictions in (0, 1)."""
    d_hat = T.as_tensor(d_hat)
    d = np.asarray(d.data if isinstance(d, Tensor) else d, dtype=np.float64)
    if d_hat.shape != d.shape:
        raise ShapeError(f"dann_domain_loss: shape mismatch {d_hat.shape} vs {d.shape}")
    if not np.all((d == 0) | (d == 1)):
        raise ValueError("dann_domain_loss: domain labels must be 0 or 1")
    lp = T.log(T.clamp_min(d_hat, LOG_FLOOR))
    lq = T.log(T.clamp_min(T.shift(T.neg(d_hat), 1.0), LOG_FLOOR))
    ll = T.sum(lp * d + lq * (1.0 - d))
    return T.scale(ll, -1.0 / d.shape[0])


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    # explicit differences keep identical rows at exactly zero distance
    diff = T.reshape(a, (a.shape[0], 1, a.shape[1])) - T.reshape(b, (1, b.shape[0], b.shape[1]))
    return T.sum(T.square(diff), axis=2)


def _kernel(a: Tensor, b: Tensor, kernel: KernelSpec) -> Tensor:
    d2 = _sq_dists(a, b)
    k = None
    for sigma, eta in zip(kernel.bandwidths, kernel.weights):
        if eta == 0:
            continue
        term = T.scale(T.exp(T.scale(d2, -1.0 / (2.0 * sigma))), eta)
        k = term if k is None else k + term
    return k


def mmd_loss(hs, ht, kernel: KernelSpec | None = None) -> Tensor:
    """Biased squared MMD between two sample sets under a multi-RBF kernel."""
    hs, ht = T.as_tensor(hs), T.as_tensor(ht)
    if hs.ndim != 2 or ht.ndim != 2 or hs.shape[1] != ht.shape[1]:
        raise ShapeError(f"mmd_loss: shape mismatch {hs.shape} vs {ht.shape}")
    kernel = kernel or KernelSpec()
    ns, nt = hs.shape[0], ht.shape[0]
    kss = T.scale(T.sum(_kernel(hs, hs, kernel)), 1.0 / ns ** 2)
    kst = T.scale(T.sum(_kernel(hs, ht, kernel)), 2.0 / (ns * nt))
    ktt = T.scale(T.sum(_kernel(ht, ht, kernel)), 1.0 / nt ** 2)
    return kss - kst + ktt


def correg_loss(hs, ht, normalize: bool = True) -> Tensor:
    """Squared Frobenius distance between the per-domain second-moment
    matrices H^T H / N (row-normalised H unless ``normalize`` is False)."""
    hs, ht = T.as_tensor(hs), T.as_tensor(ht)
    if hs.ndim != 2 or ht.ndim != 2 or hs.shape[1] != ht.shape[1]:
        raise ShapeError(f"correg_loss: shape mismatch {hs.shape} vs {ht.shape}")

    def gram(h):
        h = _prep(h, normalize)
        g = T.matmul(T.transpose(h), h)
        return T.scale(g, 1.0 / h.shape[0]) if normalize else g

    return _frob2(gram(hs) - gram(ht))


# quaternions --------------------------------------------------------------

def normalize_quaternions(q, floor: float = 1e-8) -> Tensor:
    """Unit rows with the scalar part made nonnegative."""
    q = T.as_tensor(q)
    norm = T.sqrt(T.sum(T.square(q), axis=1, keepdims=True))
    if np.any(norm.data == 0):
        raise ValueError("zero-norm predicted quaternion")
    unit = q / T.clamp_min(norm, floor)
    sign = np.where(unit.data[:, :1] < 0, -1.0, 1.0)
    return unit * sign


def pose_term(q, q_hat, xi: float) -> Tensor:
    """xi * mean log(max(1 - |q . q_hat|, 1e-6)) with q_hat normalised."""
    q = T.as_tensor(q)
    q_hat = normalize_quaternions(q_hat)
    _check_same("pose_task_loss", q, q_hat)
    dot = T.abs(T.sum(q * q_hat, axis=1))
    return T.scale(T.mean(T.log(T.clamp_min(T.shift(T.neg(dot), 1.0), POSE_FLOOR))), xi)


def pose_task_loss(pred, labels, q, q_hat, xi: float) -> Tensor:
    return task_nll(pred, labels) + pose_term(q, q_hat, xi)


def mean_angle_error(q, q_hat) -> float:
    """Mean rotation angle in degrees between two unit-quaternion batches."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    q_hat = np.asarray(q_hat.data if isinstance(q_hat, Tensor) else q_hat, dtype=np.float64)
    dots = np.clip(np.abs(np.sum(q * q_hat, axis=1)), 0.0, 1.0)
    return float(np.degrees(2.0 * np.arccos(dots)).mean())


# total --------------------------------------------------------------------

@dataclass
class LossParts:
    task: Tensor
    recon: Tensor | None = None
    difference: Tensor | None = None
    similarity: Tensor | None = None
    extra: dict = field(default_factory=dict)


def total_loss(parts: LossParts, weights: LossWeights, step: int) -> Tensor:
    """Task loss plus weighted adaptation terms; the adaptation terms are
    left out entirely while ``step < weights.warmup_steps``."""
    total = parts.task
    if step < weights.warmup_steps:
        return total
    for w, term in ((weights.alpha, parts.recon), (weights.beta, parts.difference),
                    (weights.gamma, parts.similarity)):
        if term is not None and w != 0:
            total = total + T.scale(term, w)
    return total
