"""Layer stacks, parameter groups, He initialisation and checkpoint files."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

KINDS = ("dense", "conv2d", "maxpool", "upsample", "relu", "softmax", "sigmoid",
         "grl", "reshape", "flatten")

# θ_c, θ_p^s, θ_p^t, θ_d, θ_g, θ_z
GROUPS = ("shared", "private_source", "private_target", "decoder", "task", "domain")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    kernel: tuple[int, int, int, int] = (0, 0, 0, 0)  # kh, kw, c_in, c_out
    shape: tuple[int, ...] = ()  # reshape target, per sample
    padding: str = "same"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and self.units <= 0:
            raise ValueError("dense layer needs units > 0")
        if self.kind == "conv2d" and min(self.kernel) <= 0:
            raise ValueError(f"conv2d kernel sizes must be positive, got {self.kernel}")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def conv(kh: int, kw: int, cin: int, cout: int, padding: str = "same") -> LayerSpec:
    return LayerSpec("conv2d", kernel=(kh, kw, cin, cout), padding=padding)


RELU = LayerSpec("relu")
MAXPOOL = LayerSpec("maxpool")
UPSAMPLE = LayerSpec("upsample")
SOFTMAX = LayerSpec("softmax")
SIGMOID = LayerSpec("sigmoid")
GRL = LayerSpec("grl")
FLATTEN = LayerSpec("flatten")


def reshape(*shape: int) -> LayerSpec:
    return LayerSpec("reshape", shape=tuple(shape))


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of one layer (batch axis excluded)."""
    k = spec.kind
    if k == "dense":
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got {in_shape}")
        return (spec.units,)
    if k == "conv2d":
        kh, kw, cin, cout = spec.kernel
        if len(in_shape) != 3 or in_shape[2] != cin:
            raise ShapeError(f"conv2d expects (H, W, {cin}), got {in_shape}")
        h, w, _ = in_shape
        if spec.padding == "valid":
            return (h - kh + 1, w - kw + 1, cout)
        return (h, w, cout)
    if k == "maxpool":
        if len(in_shape) != 3 or in_shape[0] % 2 or in_shape[1] % 2:
            raise ShapeError(f"maxpool expects even (H, W, C), got {in_shape}")
        return (in_shape[0] // 2, in_shape[1] // 2, in_shape[2])
    if k == "upsample":
        if len(in_shape) != 3:
            raise ShapeError(f"upsample expects (H, W, C), got {in_shape}")
        return (in_shape[0] * 2, in_shape[1] * 2, in_shape[2])
    if k == "flatten":
        return (int(np.prod(in_shape)),)
    if k == "reshape":
        if int(np.prod(spec.shape)) != int(np.prod(in_shape)):
            raise ShapeError(f"reshape {in_shape} -> {spec.shape} changes element count")
        return spec.shape
    return in_shape


def param_shapes(spec: LayerSpec, in_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    if spec.kind == "dense":
        return [(in_shape[0], spec.units), (spec.units,)]
    if spec.kind == "conv2d":
        return [spec.kernel, (spec.kernel[3],)]
    return []


def count_parameters(specs: Sequence[LayerSpec], in_shape: tuple[int, ...]) -> int:
    """Closed-form parameter count of a stack."""
    total, shape = 0, tuple(in_shape)
    for s in specs:
        if s.kind == "dense":
            total += (int(np.prod(shape)) + 1) * s.units
        elif s.kind == "conv2d":
            kh, kw, cin, cout = s.kernel
            total += kh * kw * cin * cout + cout
        shape = output_shape(s, shape)
    return total


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within two std."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Stack:
    """A LayerSpec list bound to its input shape and parameter tensors."""

    def __init__(self, name: str, specs: Sequence[LayerSpec], in_shape: tuple[int, ...]):
        self.name = name
        self.specs = list(specs)
        self.in_shape = tuple(in_shape)
        self.shapes = [self.in_shape]
        for s in self.specs:
            self.shapes.append(output_shape(s, self.shapes[-1]))
        self.params: list[list[Tensor]] = [[] for _ in self.specs]

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def init(self, rng: np.random.Generator) -> None:
        for i, s in enumerate(self.specs):
            shapes = param_shapes(s, self.shapes[i])
            if not shapes:
                continue
            wshape, bshape = shapes
            fan_in = int(np.prod(wshape[:-1]))
            w = truncated_normal(rng, wshape, np.sqrt(2.0 / fan_in))
            self.params[i] = [Tensor(w, requires_grad=True, name=f"{self.name}.{i}.w"),
                              Tensor(np.zeros(bshape), requires_grad=True, name=f"{self.name}.{i}.b")]

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.params for t in layer]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors())

    def __call__(self, x: Tensor) -> Tensor:
        return apply_stack(self, x)


def apply_stack(stack: Stack, x: Tensor) -> Tensor:
    """Run ``x`` (batch-first) through every layer in order."""
    x = T.as_tensor(x)
    if tuple(x.shape[1:]) != stack.in_shape:
        raise ShapeError(f"{stack.name}: layer 0 expects per-sample shape {stack.in_shape}, "
                         f"got {tuple(x.shape[1:])}")
    n = x.shape[0]
    for i, s in enumerate(stack.specs):
        try:
            x = _apply(s, stack.params[i], x, n)
        except ShapeError as err:
            raise ShapeError(f"{stack.name}: layer {i} ({s.kind}): {err}") from None
    return x


def _apply(s: LayerSpec, params: list[Tensor], x: Tensor, n: int) -> Tensor:
    k = s.kind
    if k == "dense":
        w, b = params
        return T.matmul(x, w) + b
    if k == "conv2d":
        w, b = params
        return T.conv2d(x, w, s.padding) + b
    if k == "relu":
        return T.relu(x)
    if k == "maxpool":
        return T.maxpool2x2(x)
    if k == "upsample":
        return T.upsample2x(x)
    if k == "softmax":
        return T.softmax(x, axis=-1)
    if k == "sigmoid":
        return T.sigmoid(x)
    if k == "grl":
        return T.gradient_reversal(x)
    if k == "flatten":
        return T.reshape(x, (n, -1))
    if k == "reshape":
        return T.reshape(x, (n,) + s.shape)
    raise ValueError(k)


class ParameterSet:
    """Named, disjoint parameter groups. Each group owns one or more stacks."""

    def __init__(self, groups: dict[str, list[Stack]]):
        self.groups = groups
        seen: set[int] = set()
        for ts in (self.group(g) for g in groups):
            for t in ts:
                if id(t) in seen:
                    raise ValueError(f"parameter {t.name} belongs to more than one group")
                seen.add(id(t))

    def group(self, name: str) -> list[Tensor]:
        return [t for st in self.groups.get(name, []) for t in st.tensors()]

    def tensors(self, groups: Sequence[str] | None = None) -> list[Tensor]:
        names = self.groups if groups is None else groups
        return [t for g in names for t in self.group(g)]

    def named(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.tensors()}

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors())

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {t.name: t.data.copy() for t in self.tensors()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.named().items():
            if name not in values:
                raise KeyError(f"checkpoint lacks parameter {name}")
            v = values[name]
            if v.shape != t.shape:
                raise ShapeError(f"checkpoint parameter {name} has shape {v.shape}, expected {t.shape}")
            t.data[...] = v


def init_parameters(groups: dict[str, list[Stack]], seed: int) -> ParameterSet:
    """He-initialise every stack from one Philox stream, in group order."""
    rng = np.random.Generator(np.random.Philox(seed))
    for name in groups:
        for st in groups[name]:
            st.init(rng)
    return ParameterSet(groups)


# checkpoint container -----------------------------------------------------
# params.bin: repeated records
#   u32 name length, utf-8 name, u32 ndim, ndim x u64 extents, float64 LE data
# params.idx: one line per record "name<TAB>shape<TAB>byte offset of data"

MAGIC = b"DSNCKPT1"


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index_lines = []
    with open(path / "params.bin", "wb") as f:
        f.write(MAGIC)
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            index_lines.append(f"{name}\t{'x'.join(map(str, arr.shape))}\t{f.tell()}")
            f.write(arr.tobytes())
    (path / "params.idx").write_text("\n".join(index_lines) + "\n")


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = (Path(path) / "params.bin").read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    pos, out = len(MAGIC), {}
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return out
