"""Procedural source/target domain pairs.

All randomness comes from numpy's Philox counter-based generator keyed by
the scenario seed, so (spec, seed) reproduces identical arrays.

glyph16      ten stroke-drawn digit-like glyphs. Source is a white glyph on
             black; target uses a fresh jitter of the same glyph as a binary
             mask that inverts a value-noise colour texture.
blobs2d      three Gaussian blobs in the plane; the target is rotated,
             translated and noisier.
pose_glyph   five asymmetric shapes at a random in-plane angle with a
             quaternion pose label. Target adds texture and pixel noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

SCENARIOS = ("glyph16", "blobs2d", "pose_glyph")


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream]))


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str = "glyph16"
    image_size: int = 16
    n_classes: int = 10
    n_train: int = 5000
    n_eval: int = 1000
    seed: int = 0
    # glyph jitter
    max_rotation: float = 15.0
    max_shift: float = 2.0
    thickness: tuple[float, float] = (1.0, 2.0)
    # target-only corruptions
    texture_cells: int = 4
    texture_contrast: float = 2.5
    texture_range: tuple[float, float] = (0.0, 1.0)
    pixel_noise: float = 0.0
    # blobs2d
    blob_std: float = 0.5
    target_rotation: float = 25.0
    target_shift: tuple[float, float] = (1.5, -0.9)
    target_noise: float = 0.6

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")


def default_spec(scenario: str, **overrides) -> ScenarioSpec:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    base = {"glyph16": dict(n_classes=10, texture_range=(0.0, 0.7)),
            "blobs2d": dict(n_classes=3, n_train=600, n_eval=300),
            "pose_glyph": dict(n_classes=5, max_rotation=180.0, max_shift=1.0,
                               thickness=(1.5, 2.0), pixel_noise=0.1)}[scenario]
    base.update(overrides)
    return ScenarioSpec(scenario=scenario, **base)


@dataclass
class Sample:
    image: np.ndarray
    class_label: int | None
    domain_label: int
    pose: np.ndarray | None = None


@dataclass
class DomainSet:
    """Images (N, H, W, C) or points (N, 2), integer labels, optional poses."""

    images: np.ndarray
    labels: np.ndarray
    domain: int
    poses: np.ndarray | None = None
    n_classes: int = 10

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        pose = None if self.poses is None else self.poses[i]
        return Sample(self.images[i], int(self.labels[i]), self.domain, pose)

    def onehot(self, idx=slice(None)) -> np.ndarray:
        return np.eye(self.n_classes)[self.labels[idx]]


@dataclass
class DomainPair:
    spec: ScenarioSpec
    source_train: DomainSet
    target_train: DomainSet
    source_eval: DomainSet
    target_eval: DomainSet
    raw: dict = field(default_factory=dict, repr=False)


# stroke programs ----------------------------------------------------------
# glyph coordinates in [-1, 1]^2, y pointing down


def _ellipse(cx, cy, rx, ry, n=14, start=0.0, stop=2 * np.pi):
    t = np.linspace(start, stop, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _poly(*pts):
    return np.asarray(pts, dtype=np.float64)


GLYPHS: list[list[np.ndarray]] = [
    [_ellipse(0, 0, 0.5, 0.8)],
    [_poly((-0.3, -0.5), (0.05, -0.85), (0.05, 0.85)), _poly((-0.3, 0.85), (0.4, 0.85))],
    [_poly((-0.5, -0.45), (-0.25, -0.8), (0.3, -0.8), (0.5, -0.45), (-0.5, 0.8), (0.55, 0.8))],
    [_poly((-0.5, -0.8), (0.5, -0.8), (0.0, -0.05), (0.5, 0.3), (0.3, 0.8), (-0.5, 0.75))],
    [_poly((0.25, 0.85), (0.25, -0.85), (-0.55, 0.3), (0.6, 0.3))],
    [_poly((0.5, -0.8), (-0.4, -0.8), (-0.45, -0.05), (0.35, -0.05), (0.5, 0.4), (0.3, 0.8), (-0.5, 0.8))],
    [_poly((0.4, -0.8), (-0.4, 0.0), (-0.45, 0.5), (-0.1, 0.8), (0.4, 0.6), (0.4, 0.15), (-0.4, 0.1))],
    [_poly((-0.5, -0.8), (0.55, -0.8), (-0.1, 0.85)), _poly((-0.2, 0.0), (0.35, 0.0))],
    [_ellipse(0, -0.42, 0.35, 0.38), _ellipse(0, 0.42, 0.45, 0.4)],
    [_ellipse(0, -0.35, 0.42, 0.42), _poly((0.42, -0.35), (0.3, 0.85))],
]

SHAPES: list[list[np.ndarray]] = [
    [_poly((-0.4, -0.8), (-0.4, 0.8), (0.5, 0.8))],
    [_poly((-0.4, 0.8), (-0.4, -0.8), (0.5, -0.8)), _poly((-0.4, 0.0), (0.3, 0.0))],
    [_poly((-0.4, 0.8), (-0.4, -0.8), (0.3, -0.8), (0.5, -0.5), (0.3, -0.15), (-0.4, -0.15))],
    [_poly((0.0, 0.8), (0.0, -0.8)), _poly((-0.45, -0.35), (0.0, -0.8), (0.45, -0.35))],
    [_poly((-0.55, 0.2), (0.55, 0.2), (0.0, -0.7), (-0.55, 0.2)), _poly((0.0, 0.2), (0.0, 0.85))],
]


def _segments(strokes: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    a = np.concatenate([s[:-1] for s in strokes])
    b = np.concatenate([s[1:] for s in strokes])
    return a, b


_GLYPH_SEGS = [_segments(g) for g in GLYPHS]
_SHAPE_SEGS = [_segments(g) for g in SHAPES]


def render_mask(segs, size: int, angle_deg: float, shift: tuple[float, float],
                thickness: float, extent: float = 0.38) -> np.ndarray:
    """Binary (size, size) mask of all pixels within thickness/2 of a stroke.

    ``extent`` is the glyph half-height as a fraction of the image size.
    """
    a, b = segs
    th = np.radians(angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    centre = (size - 1) / 2.0
    s = extent * size
    a = a @ rot.T * s + centre + np.asarray(shift)
    b = b @ rot.T * s + centre + np.asarray(shift)
    ys, xs = np.mgrid[0:size, 0:size]
    p = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)[:, None, :]
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, axis=2) / np.maximum(np.sum(ab * ab, axis=1), 1e-12), 0.0, 1.0)
    d = np.linalg.norm(p - (a + t[..., None] * ab), axis=2).min(axis=1)
    # small slack keeps one-pixel strokes connected at oblique angles
    return (d <= thickness / 2.0 + 0.15).reshape(size, size)


def value_noise(rng: np.random.Generator, size: int, channels: int, cells: int,
                contrast: float = 2.5) -> np.ndarray:
    """Two-octave smooth value noise in [0, 1], independent per channel,
    contrast-stretched about 0.5 and clipped."""
    out = np.zeros((size, size, channels))
    for octave, weight in ((cells, 0.65), (2 * cells, 0.35)):
        lattice = rng.uniform(0.0, 1.0, size=(octave + 1, octave + 1, channels))
        u = np.linspace(0.0, octave, size, endpoint=False) + octave / (2.0 * size)
        i = np.floor(u).astype(int)
        f = u - i
        f = f * f * (3.0 - 2.0 * f)
        r0 = lattice[i][:, i] * (1 - f)[None, :, None] + lattice[i][:, i + 1] * f[None, :, None]
        r1 = lattice[i + 1][:, i] * (1 - f)[None, :, None] + lattice[i + 1][:, i + 1] * f[None, :, None]
        out += weight * (r0 * (1 - f)[:, None, None] + r1 * f[:, None, None])
    return np.clip((out - 0.5) * contrast + 0.5, 0.0, 1.0)


def _stratified_labels(rng: np.random.Generator, n: int, n_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


def _jitter(rng, spec: ScenarioSpec) -> tuple[float, tuple[float, float], float]:
    angle = rng.uniform(-spec.max_rotation, spec.max_rotation)
    shift = tuple(rng.uniform(-spec.max_shift, spec.max_shift, size=2))
    thick = rng.uniform(*spec.thickness)
    return angle, shift, thick


def pose_quaternion(angle_deg) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation about z, with w >= 0."""
    half = np.radians(np.asarray(angle_deg, dtype=np.float64)) / 2.0
    q = np.stack([np.cos(half), np.zeros_like(half), np.zeros_like(half), np.sin(half)], axis=-1)
    return np.where(q[..., :1] < 0, -q, q)


def _render_split(rng, spec: ScenarioSpec, segs_table, n: int, target: bool, labels=None,
                  poses=False):
    size = spec.image_size
    labels = _stratified_labels(rng, n, spec.n_classes) if labels is None else labels
    imgs = np.empty((n, size, size, 3))
    masks = np.empty((n, size, size), dtype=bool)
    backgrounds = np.empty((n, size, size, 3)) if target else None
    angles = np.empty(n)
    for k, c in enumerate(labels):
        angle, shift, thick = _jitter(rng, spec)
        angles[k] = angle
        m = render_mask(segs_table[c], size, angle, shift, thick)
        masks[k] = m
        if target:
            lo, hi = spec.texture_range
            bg = lo + (hi - lo) * value_noise(rng, size, 3, spec.texture_cells, spec.texture_contrast)
            backgrounds[k] = bg
            img = np.where(m[..., None], 1.0 - bg, bg)
            if spec.pixel_noise > 0:
                img = np.clip(img + rng.normal(0.0, spec.pixel_noise, size=img.shape), 0.0, 1.0)
        else:
            img = np.repeat(m[..., None].astype(np.float64), 3, axis=2)
        imgs[k] = img
    q = pose_quaternion(angles) if poses else None
    return imgs, labels, q, masks, backgrounds


def _centre(train: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    """Subtract the training-split mean and rescale so [0, 1] maps into [-1, 1]."""
    m = float(train.mean())
    s = max(m, 1.0 - m)
    return [(x - m) / s for x in (train,) + others]


def _generate_images(spec: ScenarioSpec, segs_table, poses: bool) -> DomainPair:
    raw = {}
    splits = {}
    for domain, target in ((0, False), (1, True)):
        rng = philox(spec.seed, 1 + domain)
        tr = _render_split(rng, spec, segs_table, spec.n_train, target, poses=poses)
        ev = _render_split(rng, spec, segs_table, spec.n_eval, target, poses=poses)
        raw[domain] = {"train": tr, "eval": ev}
        x_tr, x_ev = _centre(tr[0], ev[0])
        splits[domain] = (DomainSet(x_tr, tr[1], domain, tr[2], spec.n_classes),
                          DomainSet(x_ev, ev[1], domain, ev[2], spec.n_classes))
    return DomainPair(spec, splits[0][0], splits[1][0], splits[0][1], splits[1][1], raw)


def generate_glyph16(spec: ScenarioSpec) -> DomainPair:
    return _generate_images(spec, _GLYPH_SEGS, poses=False)


def generate_pose_glyph(spec: ScenarioSpec) -> DomainPair:
    return _generate_images(spec, _SHAPE_SEGS, poses=True)


def _blob_centres(n_classes: int) -> np.ndarray:
    ang = np.pi / 2 + 2 * np.pi * np.arange(n_classes) / n_classes
    return 2.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def generate_blobs2d(spec: ScenarioSpec) -> DomainPair:
    centres = _blob_centres(spec.n_classes)
    th = np.radians(spec.target_rotation)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    sets = {}
    for domain in (0, 1):
        rng = philox(spec.seed, 1 + domain)
        for split, n in (("train", spec.n_train), ("eval", spec.n_eval)):
            labels = _stratified_labels(rng, n, spec.n_classes)
            x = centres[labels] + rng.normal(0.0, spec.blob_std, size=(n, 2))
            if domain == 1:
                x = x @ rot.T + np.asarray(spec.target_shift)
                x = x + rng.normal(0.0, spec.target_noise, size=(n, 2))
            sets[domain, split] = DomainSet(x, labels, domain, None, spec.n_classes)
    return DomainPair(spec, sets[0, "train"], sets[1, "train"], sets[0, "eval"], sets[1, "eval"])


def generate(spec: ScenarioSpec) -> DomainPair:
    return {"glyph16": generate_glyph16, "blobs2d": generate_blobs2d,
            "pose_glyph": generate_pose_glyph}[spec.scenario](spec)


# batching -----------------------------------------------------------------

@dataclass
class DomainBatch:
    """Labelled source samples plus unlabelled target samples."""

    source_x: np.ndarray
    source_y: np.ndarray        # one-hot
    target_x: np.ndarray
    source_pose: np.ndarray | None = None

    @property
    def domain_labels(self) -> np.ndarray:
        ns, nt = len(self.source_x), len(self.target_x)
        return np.concatenate([np.zeros(ns), np.ones(nt)])[:, None]


def _epochs(rng: np.random.Generator, n: int, batch_size: int) -> Iterator[np.ndarray]:
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def batch_iterator(source: DomainSet, target: DomainSet, batch_size: int,
                   seed: int) -> Iterator[DomainBatch]:
    """Endless stream of paired batches with independent per-domain shuffles."""
    if len(source) == 0 or len(target) == 0:
        raise ValueError("batch_iterator needs nonempty source and target sets")
    if batch_size > min(len(source), len(target)):
        raise ValueError(f"batch size {batch_size} exceeds set size "
                         f"({len(source)} source, {len(target)} target)")
    return _batches(source, target, batch_size, seed)


def _batches(source: DomainSet, target: DomainSet, batch_size: int, seed: int) -> Iterator[DomainBatch]:
    src = _epochs(philox(seed, 11), len(source), batch_size)
    tgt = _epochs(philox(seed, 12), len(target), batch_size)
    for si, ti in zip(src, tgt):
        pose = None if source.poses is None else source.poses[si]
        yield DomainBatch(source.images[si], source.onehot(si), target.images[ti], pose)


# dumps --------------------------------------------------------------------

def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to uint8 [0, 255] with clamping."""
    return np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_pnm(path: str | Path, img: np.ndarray) -> None:
    """Binary PGM (H, W) or PPM (H, W, 3) from a uint8 array."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2 or img.shape[2] == 1:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    Path(path).write_bytes(header.encode() + img.tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    magic, w, h = parts[0], int(parts[1]), int(parts[2])
    body = buf[len(buf) - w * h * (3 if magic == b"P6" else 1):]
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if magic == b"P6" else arr.reshape(h, w)


def dump_dataset(pair: DomainPair, out_dir: str | Path, limit: int | None = None) -> None:
    """One directory per domain with PPM images and a ``labels.txt`` index."""
    out_dir = Path(out_dir)
    for name, ds in (("source", pair.source_train), ("target", pair.target_train)):
        d = out_dir / name
        d.mkdir(parents=True, exist_ok=True)
        n = len(ds) if limit is None else min(limit, len(ds))
        lines = []
        for i in range(n):
            if ds.images.ndim == 4:
                fname = f"{i:06d}.ppm"
                write_pnm(d / fname, to_bytes(ds.images[i]))
            else:
                fname = " ".join(f"{v:.17g}" for v in ds.images[i])
            row = [fname, str(int(ds.labels[i]))]
            if ds.poses is not None:
                row += [f"{v:.17g}" for v in ds.poses[i]]
            lines.append("\t".join(row))
        (d / "labels.txt").write_text("\n".join(lines) + "\n")


def with_seed(spec: ScenarioSpec, seed: int) -> ScenarioSpec:
    return replace(spec, seed=seed)
