"""Dense float64 tensors with a define-by-run reverse-mode autodiff engine.

Every differentiable operation appends a node to the active :class:`Graph`
of the current thread. :func:`backward` walks that node list in reverse,
which is a valid reverse topological order because nodes are recorded in
the order they are created. A graph supports exactly one backward pass;
after it the thread starts a fresh graph on the next operation.

Arrays are stored channels-last (N, H, W, C) for images.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Graph:
    """Ordered record of the nodes produced by one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def record(self, node: "Tensor") -> None:
        if self.consumed:
            raise GraphError("graph already consumed by backward; start a new forward pass")
        self.nodes.append(node)


_local = threading.local()


def current_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None or g.consumed:
        g = Graph()
        _local.graph = g
    return g


def new_graph() -> Graph:
    """Discard the thread's active graph and start an empty one."""
    _local.graph = Graph()
    return _local.graph


def _recording() -> bool:
    return not getattr(_local, "no_grad", False)


@contextmanager
def no_grad():
    """Evaluate without recording anything on the graph."""
    prev = getattr(_local, "no_grad", False)
    _local.no_grad = True
    try:
        yield
    finally:
        _local.no_grad = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    ``requires_grad`` marks a parameter leaf. Intermediate tensors carry
    their parents and a closure mapping the upstream gradient to one
    gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "name", "graph")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name
        self.graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # identity hashing so tensors can key a GradientMap
    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.backward_fn is not None


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _recording() and any(_needs_grad(p) for p in parents):
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        g = current_graph()
        g.record(out)
        out.graph = g
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def shift(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data + c, "shift", (a,), lambda g: (g,))


# elementwise unary --------------------------------------------------------

def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # relu'(0) = 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient flows only where a > floor."""
    a = as_tensor(a)
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), "clamp_min", (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


# reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# shape ops ----------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, "concat", ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    basic = isinstance(idx, (slice, int)) or (
        isinstance(idx, tuple) and all(isinstance(i, (slice, int)) for i in idx))

    def back(g):
        full = np.zeros(a.shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], "index", (a,), back)


# linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T if _needs_grad(a) else None,
                            a.data.T @ g if _needs_grad(b) else None))


# softmax ------------------------------------------------------------------

def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, "log_softmax", (a,),
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, "softmax", (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# gradient reversal --------------------------------------------------------

def gradient_reversal(a) -> Tensor:
    """Identity forward; multiplies the upstream gradient by -1."""
    a = as_tensor(a)
    return _make(a.data, "grl", (a,), lambda g: (-g,))


# images (N, H, W, C) ------------------------------------------------------

def _correlate(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid stride-1 cross-correlation of padded ``xp`` with (kh, kw, ci, co)
    ``w``, accumulated as one small matmul per kernel offset."""
    kh, kw = w.shape[:2]
    oh, ow = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    out = np.zeros(xp.shape[:1] + (oh, ow, w.shape[3]))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + oh, j:j + ow, :] @ w[i, j]
    return out


def conv2d(x, w, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation. ``w`` has shape (kh, kw, c_in, c_out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x.shape
    if padding == "same":
        top, left = (kh - 1) // 2, (kw - 1) // 2
        bottom, right = kh - 1 - top, kw - 1 - left
    elif padding == "valid":
        if h < kh or wd < kw:
            raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
        top = left = bottom = right = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    out = _correlate(xp, w.data)
    oh, ow = out.shape[1:3]

    def back(g):
        gw = np.empty(w.shape)
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                patch = np.ascontiguousarray(xp[:, i:i + oh, j:j + ow, :]).reshape(-1, cin)
                gw[i, j] = patch.T @ g2
        gx = None
        if _needs_grad(x):
            # input gradient: correlate the fully padded upstream gradient
            # with the spatially flipped, in/out-swapped kernel
            gp = np.pad(g, ((0, 0), (kh - 1 - top, kh - 1 - bottom), (kw - 1 - left, kw - 1 - right), (0, 0)))
            gx = _correlate(gp, w.data[::-1, ::-1].transpose(0, 1, 3, 2))
        return gx, gw

    return _make(out, "conv2d", (x, w), back)


def maxpool2x2(x) -> Tensor:
    """2x2 window, stride 2. Ties route the gradient to the first element
    of the window in row-major order."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"maxpool2x2: input shape {x.shape} needs even spatial extents")
    n, h, w, c = x.shape
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(n, h, w, c),)

    return _make(out, "maxpool2x2", (x,), back)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour upsampling by a factor of two."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected 4-d input, got {x.shape}")
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _make(out, "upsample2x", (x,),
                 lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),))


# backward -----------------------------------------------------------------

class GradientMap(dict):
    """Maps parameter-leaf tensors (by identity) to gradient arrays."""

    def by_name(self) -> dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items()}


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> GradientMap:
    """Reverse-mode gradients of a scalar ``loss``.

    When ``leaves`` is given every one of them appears in the result, with
    a zero array if the loss does not depend on it. Otherwise all parameter
    leaves reached from ``loss`` are returned.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    leaves = list(leaves) if leaves is not None else None
    result = GradientMap()
    if loss.backward_fn is None:
        if loss.requires_grad:
            result[loss] = np.ones(loss.shape)
        for leaf in leaves or ():
            result.setdefault(leaf, np.zeros(leaf.shape))
        return result
    graph = loss.graph
    if graph.consumed:
        raise GraphError("backward already ran on this graph; run a new forward pass")
    graph.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            if parent.backward_fn is not None:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
            elif parent.requires_grad:
                if parent in result:
                    result[parent] = result[parent] + pg
                else:
                    result[parent] = np.array(pg, dtype=DTYPE)
    if leaves is not None:
        for leaf in leaves:
            if leaf not in result:
                result[leaf] = np.zeros(leaf.shape)
    return result


# finite differences -------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    leaf: str | None
    per_leaf: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def finite_difference_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                            epsilon: float = 1e-5, probe: int | None = None,
                            rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare :func:`backward` against central differences.

    ``loss_fn`` rebuilds the loss from the current values of ``params``.
    With ``probe`` set, only that many randomly chosen entries per leaf are
    perturbed. Relative error uses max(|analytic|, |numeric|, 1e-8).
    """
    params = list(params)
    new_graph()
    analytic = backward(loss_fn(), params)
    report = GradcheckReport(0.0, None)
    for i, p in enumerate(params):
        label = p.name or f"leaf{i}"
        flat = p.data.reshape(-1)
        if probe is not None and probe < flat.size:
            picks = (rng or np.random.default_rng(0)).choice(flat.size, size=probe, replace=False)
        else:
            picks = range(flat.size)
        ga = analytic[p].reshape(-1)
        worst = 0.0
        for k in picks:
            orig = flat[k]
            with no_grad():
                flat[k] = orig + epsilon
                fp = loss_fn().item()
                flat[k] = orig - epsilon
                fm = loss_fn().item()
            flat[k] = orig
            num = (fp - fm) / (2 * epsilon)
            denom = max(np.abs(ga[k]), np.abs(num), 1e-8)
            worst = max(worst, float(np.abs(ga[k] - num) / denom))
        report.per_leaf[label] = worst
        if worst >= report.max_rel_error:
            report.max_rel_error, report.leaf = worst, label
    return report
