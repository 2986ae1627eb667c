"""IDX ingestion, a procedurally generated stroke corpus, and seeded batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .stn import LevelGeometry, make_action, warp
from .tape import Tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("pixels must be finite")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], name or self.name)

    def where(self, mask: np.ndarray, name: str | None = None) -> "Dataset":
        return self.subset(np.flatnonzero(mask), name)


def _read(path) -> bytes:
    return Path(path).read_bytes()


def read_idx(path, expect_magic: int) -> np.ndarray:
    buf = _read(path)
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expect_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    n = int(np.prod(dims))
    if len(buf) < head + n:
        raise TruncatedFileError(f"{path}: expected {n} data bytes, found {len(buf) - head}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data with an unsigned-byte IDX header."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx(image_path, label_path, name: str | None = None) -> Dataset:
    raw = read_idx(image_path, IMAGE_MAGIC)
    labels = read_idx(label_path, LABEL_MAGIC)
    if len(raw) != len(labels):
        raise CountMismatchError(f"{len(raw)} images vs {len(labels)} labels")
    images = raw.astype(np.float32) / 255.0
    return Dataset(images, labels.astype(np.int64), name or Path(image_path).stem)


def save_idx(ds: Dataset, image_path, label_path) -> None:
    write_idx(image_path, np.floor(ds.images * 255 + 0.5))
    write_idx(label_path, ds.labels)


# --- synthetic strokes ---------------------------------------------------

def stroke_primitives(size: int = 12) -> np.ndarray:
    """(2, size, size): a horizontal bar and a half-ring arc, values in [0, 1]."""
    c = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(c, c, indexing="ij")
    line = np.clip(1.0 - np.abs(yy) / 0.35, 0, 1) * (np.abs(xx) < 0.9)
    r = np.hypot(xx, yy + 0.4)
    arc = np.clip(1.0 - np.abs(r - 0.75) / 0.25, 0, 1) * (yy < 0.4)
    return np.stack([line, arc]).astype(np.float32)


# action = (sx, sy, tx, ty, theta, shear); scales stay inside the default part bounds
DEFAULT_CLASSES: tuple[tuple[tuple[int, tuple[float, ...]], ...], ...] = (
    # "T"
    ((0, (0.40, 0.30, 0.0, -0.45, 0.0, 0.0)), (0, (0.40, 0.30, 0.0, 0.05, 0.75, 0.0)),
     (0, (0.40, 0.30, 0.0, 0.05, -0.75, 0.0)), (1, (0.30, 0.30, 0.0, 0.45, 0.0, 0.0))),
    # box-ish
    ((0, (0.40, 0.30, 0.0, -0.4, 0.0, 0.0)), (0, (0.40, 0.30, 0.0, 0.4, 0.0, 0.0)),
     (1, (0.35, 0.35, -0.35, 0.0, 0.0, 0.0)), (1, (0.35, 0.35, 0.35, 0.0, 0.0, 0.0))),
    # zig-zag
    ((0, (0.40, 0.30, -0.3, -0.45, 0.3, 0.0)), (0, (0.40, 0.30, 0.3, -0.15, -0.3, 0.0)),
     (0, (0.40, 0.30, -0.3, 0.15, 0.3, 0.0)), (0, (0.40, 0.30, 0.3, 0.45, -0.3, 0.0))),
)


@dataclass
class SynthSpec:
    count: int = 256
    seed: int = 0
    classes: tuple = DEFAULT_CLASSES
    jitter: float = 0.1
    image_size: int = 28
    patch_size: int = 12
    primitives: np.ndarray | None = None
    geometry: LevelGeometry | None = None

    def geom(self) -> LevelGeometry:
        return self.geometry or LevelGeometry.parts(self.image_size, self.patch_size)


@dataclass
class StrokePart:
    primitive: int
    action: tuple[float, ...]  # (sx, sy, tx, ty, theta, shear) after jitter


def _check_action(a, g: LevelGeometry) -> None:
    sx, sy, tx, ty, th, m = a
    ok = (g.s_min <= sx <= g.s_max and g.s_min <= sy <= g.s_max and abs(tx) <= 1 and abs(ty) <= 1
          and abs(th) <= g.theta_max and abs(m) <= g.shear_max)
    if not ok:
        raise ValueError(f"action {a} outside level bounds")


def render_parts(parts: list[StrokePart], primitives: np.ndarray, image_size: int) -> np.ndarray:
    """Sum of the warped primitives, (n_parts, image_size, image_size), unclamped."""
    out = []
    for p in parts:
        a = make_action(*p.action)
        out.append(warp(Tensor(primitives[p.primitive][None].astype(np.float64)), a, image_size).data[0])
    return np.stack(out)


def synth_strokes(spec: SynthSpec) -> tuple[Dataset, list[list[StrokePart]]]:
    """Images made of placed stroke primitives, with ground-truth parses.

    Class k is ``spec.classes[k]``; samples cycle through the classes and
    translations get uniform +-jitter from a generator seeded by ``spec.seed``.
    """
    g = spec.geom()
    prims = spec.primitives if spec.primitives is not None else stroke_primitives(spec.patch_size)
    for cls in spec.classes:
        for prim, a in cls:
            if not 0 <= prim < len(prims):
                raise ValueError(f"unknown primitive {prim}")
            _check_action(a, g)
    rng = np.random.default_rng(spec.seed)
    images, labels, truth = [], [], []
    for i in range(spec.count):
        k = i % len(spec.classes)
        parts = []
        for prim, a in spec.classes[k]:
            sx, sy, tx, ty, th, m = a
            if spec.jitter:
                tx = float(np.clip(tx + rng.uniform(-spec.jitter, spec.jitter), -1, 1))
                ty = float(np.clip(ty + rng.uniform(-spec.jitter, spec.jitter), -1, 1))
            parts.append(StrokePart(prim, (sx, sy, tx, ty, th, m)))
        img = np.clip(render_parts(parts, prims, spec.image_size).sum(0), 0, 1)
        images.append(img.astype(np.float32))
        labels.append(k)
        truth.append(parts)
    ds = Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), name=f"synth-{spec.seed}")
    return ds, truth


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
    """Yield image batches for one epoch in a seeded shuffled order; last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(ds), seed, epoch)
    for lo in range(0, len(ds), batch_size):
        yield ds.images[order[lo:lo + batch_size]]


def epoch_order(n: int, seed: int, epoch: int = 0) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)
