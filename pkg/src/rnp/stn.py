"""Differentiable affine placement (``warp``) and zoom-in extraction of patches.

Coordinates are normalized to [-1, 1] with pixel centres at (2i + 1) / n - 1
and zero padding outside the source.  An action's 2x3 matrix maps patch
coordinates to canvas coordinates; ``warp`` pulls every canvas pixel back
through its inverse, ``extract_patch`` pushes every patch pixel forward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tape import Tensor, ops

ACTION_DIM = 6


@dataclass(frozen=True)
class LevelGeometry:
    canvas_size: int
    patch_size: int
    s_min: float
    s_max: float
    theta_max: float = math.pi / 4
    shear_max: float = 0.5

    def __post_init__(self):
        if not 0 < self.patch_size <= self.canvas_size:
            raise ValueError(f"need 0 < patch_size <= canvas_size, got {self.patch_size}, {self.canvas_size}")
        if not 0 < self.s_min < self.s_max <= 1:
            raise ValueError(f"need 0 < s_min < s_max <= 1, got {self.s_min}, {self.s_max}")

    @classmethod
    def parts(cls, canvas_size: int = 28, patch_size: int = 12, **kw) -> "LevelGeometry":
        """Top level: parts span patch/2 .. patch pixels of the canvas (6-12 px on 28)."""
        return cls(canvas_size, patch_size, patch_size / 2 / canvas_size, patch_size / canvas_size, **kw)

    @classmethod
    def subparts(cls, patch_size: int = 12, **kw) -> "LevelGeometry":
        """Bottom level: sub-parts span patch/8 .. patch/3 pixels (1.5-4 px on 12)."""
        return cls(patch_size, patch_size, 1 / 8, 1 / 3, **kw)

    def to_dict(self) -> dict:
        return dict(canvas_size=self.canvas_size, patch_size=self.patch_size, s_min=self.s_min,
                    s_max=self.s_max, theta_max=self.theta_max, shear_max=self.shear_max)


@dataclass
class AffineAction:
    """Squashed action; every field is a (B,) tensor.  ``raw`` is (B, 6) or None."""

    sx: Tensor
    sy: Tensor
    tx: Tensor
    ty: Tensor
    theta: Tensor
    shear: Tensor
    raw: Tensor | None = None

    def params(self) -> np.ndarray:
        """(B, 6) array of (sx, sy, tx, ty, theta, shear)."""
        return np.stack([t.data for t in (self.sx, self.sy, self.tx, self.ty, self.theta, self.shear)], axis=-1)

    def stacked(self) -> Tensor:
        """(B, 6) tensor of the squashed parameters, on the tape."""
        cols = [ops.reshape(t, (-1, 1)) for t in (self.sx, self.sy, self.tx, self.ty, self.theta, self.shear)]
        return ops.concat(cols, axis=1)

    @property
    def batch(self) -> int:
        return self.sx.shape[0]


def make_action(sx=1.0, sy=1.0, tx=0.0, ty=0.0, theta=0.0, shear=0.0, dtype=np.float64) -> AffineAction:
    """Build an already-squashed action from scalars or (B,) arrays."""
    vals = np.broadcast_arrays(*[np.atleast_1d(np.asarray(v, dtype=dtype)) for v in (sx, sy, tx, ty, theta, shear)])
    return AffineAction(*[Tensor(v.copy()) for v in vals])


def squash_action(raw: Tensor, geom: LevelGeometry) -> AffineAction:
    """Map an unbounded (B, 6) network output onto the level's bounded action box."""
    if raw.ndim == 1:
        raw = ops.reshape(raw, (1, -1))
    if raw.shape[-1] != ACTION_DIM:
        raise ValueError(f"raw action must have {ACTION_DIM} entries, got shape {raw.shape}")
    span = geom.s_max - geom.s_min
    col = [ops.slice(raw, (slice(None), i)) for i in range(ACTION_DIM)]
    sx = ops.add(ops.mul(ops.sigmoid(col[0]), span), geom.s_min)
    sy = ops.add(ops.mul(ops.sigmoid(col[1]), span), geom.s_min)
    tx = ops.tanh(col[2])
    ty = ops.tanh(col[3])
    theta = ops.mul(ops.tanh(col[4]), geom.theta_max)
    shear = ops.mul(ops.tanh(col[5]), geom.shear_max)
    return AffineAction(sx, sy, tx, ty, theta, shear, raw=raw)


def _linear_entries(a: AffineAction):
    # M = R(theta) @ [[1, m], [0, 1]] @ diag(sx, sy)
    c, s = ops.cos(a.theta), ops.sin(a.theta)
    m00 = ops.mul(c, a.sx)
    m01 = ops.mul(ops.add(ops.mul(c, a.shear), ops.neg(s)), a.sy)
    m10 = ops.mul(s, a.sx)
    m11 = ops.mul(ops.add(ops.mul(s, a.shear), c), a.sy)
    return m00, m01, m10, m11


def _inverse_entries(a: AffineAction):
    # M^-1 = diag(1/sx, 1/sy) @ [[1, -m], [0, 1]] @ R(-theta)
    if np.any(a.sx.data <= 0) or np.any(a.sy.data <= 0):
        raise ValueError("singular affine action: scales must be positive")
    c, s = ops.cos(a.theta), ops.sin(a.theta)
    rx, ry = ops.reciprocal(a.sx), ops.reciprocal(a.sy)
    i00 = ops.mul(ops.add(c, ops.mul(a.shear, s)), rx)
    i01 = ops.mul(ops.add(s, ops.neg(ops.mul(a.shear, c))), rx)
    i10 = ops.mul(ops.neg(s), ry)
    i11 = ops.mul(c, ry)
    return i00, i01, i10, i11


def affine_matrix(a: AffineAction) -> Tensor:
    """(B, 2, 3) matrices [M | t] mapping patch coordinates to canvas coordinates."""
    m00, m01, m10, m11 = _linear_entries(a)
    cols = [ops.reshape(t, (-1, 1)) for t in (m00, m01, a.tx, m10, m11, a.ty)]
    return ops.reshape(ops.concat(cols, axis=1), (-1, 2, 3))


def pixel_grid(n: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (x, y) normalized centres of an n x n grid, row-major."""
    c = (2 * np.arange(n, dtype=dtype) + 1) / n - 1
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return xx.reshape(1, -1), yy.reshape(1, -1)


def _apply(e00, e01, e10, e11, gx, gy) -> Tensor:
    col = lambda t: ops.reshape(t, (-1, 1))
    px = ops.add(ops.mul(col(e00), gx), ops.mul(col(e01), gy))
    py = ops.add(ops.mul(col(e10), gx), ops.mul(col(e11), gy))
    n = px.shape[1]
    return ops.concat([ops.reshape(px, (-1, n, 1)), ops.reshape(py, (-1, n, 1))], axis=2)


def _batched(t: Tensor) -> tuple[Tensor, bool]:
    if t.ndim == 2:
        return ops.reshape(t, (1,) + t.shape), True
    return t, False


def warp(patch: Tensor, a: AffineAction, out: int) -> Tensor:
    """Place (B, P, P) patches onto (B, out, out) canvases."""
    patch, single = _batched(patch)
    if patch.ndim != 3 or patch.shape[1] != patch.shape[2]:
        raise ValueError(f"warp: expected square patches (B,P,P), got {patch.shape}")
    if a.batch != patch.shape[0]:
        raise ValueError(f"warp: {patch.shape[0]} patches but {a.batch} actions")
    gx, gy = pixel_grid(out, patch.dtype)
    dx = ops.add(gx, ops.neg(ops.reshape(a.tx, (-1, 1))))
    dy = ops.add(gy, ops.neg(ops.reshape(a.ty, (-1, 1))))
    coords = _apply(*_inverse_entries(a), dx, dy)
    canvas = ops.reshape(ops.bilinear_sample(patch, coords), (-1, out, out))
    return ops.reshape(canvas, (out, out)) if single else canvas


def extract_patch(image: Tensor, a: AffineAction, out: int) -> Tensor:
    """Zoom into the region of (B, C, C) images an action covers, giving (B, out, out)."""
    image, single = _batched(image)
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise ValueError(f"extract_patch: expected square images (B,C,C), got {image.shape}")
    if a.batch != image.shape[0]:
        raise ValueError(f"extract_patch: {image.shape[0]} images but {a.batch} actions")
    if np.any(a.sx.data <= 0) or np.any(a.sy.data <= 0):
        raise ValueError("singular affine action: scales must be positive")
    gx, gy = pixel_grid(out, image.dtype)
    coords = _apply(*_linear_entries(a), gx, gy)
    shift = ops.concat([ops.reshape(a.tx, (-1, 1, 1)), ops.reshape(a.ty, (-1, 1, 1))], axis=2)
    coords = ops.add(coords, shift)
    patch = ops.reshape(ops.bilinear_sample(image, coords), (-1, out, out))
    return ops.reshape(patch, (out, out)) if single else patch
