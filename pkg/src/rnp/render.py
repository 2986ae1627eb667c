"""PNG export and colour-coded parse overlays.

Exported pixels are clamped to [0, 1] and quantised round-half-up to 8 bits;
nothing here feeds back into the loss.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

# depth-first part order; colours past the fourth are only used when tau2 > 4
PART_COLORS: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("blue", (0, 0, 255)),
    ("red", (255, 0, 0)),
    ("green", (0, 255, 0)),
    ("orange", (255, 165, 0)),
    ("purple", (160, 32, 240)),
    ("cyan", (0, 255, 255)),
    ("magenta", (255, 0, 255)),
    ("yellow", (255, 255, 0)),
)


def part_color(t: int) -> tuple[str, tuple[int, int, int]]:
    return PART_COLORS[t % len(PART_COLORS)]


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], then floor(255 v + 1/2)."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    """Grayscale (H, W) or RGB (H, W, 3) array of floats in [0, 1]."""
    arr = to_uint8(img)
    Image.fromarray(arr).save(Path(path), format="PNG")  # uint8 (H, W) -> L, (H, W, 3) -> RGB


def overlay(placed: np.ndarray) -> np.ndarray:
    """(T, H, W) placed parts -> (H, W, 3) composite.

    Each pixel takes the colour of the part contributing most to it, scaled by
    the clamped canvas intensity.
    """
    placed = np.asarray(placed, dtype=np.float64)
    total = np.clip(placed.sum(0), 0, 1)
    owner = placed.argmax(0)
    colors = np.array([part_color(t)[1] for t in range(len(placed))], dtype=np.float64) / 255.0
    return colors[owner] * total[..., None]


def part_overlay(placed: np.ndarray, t: int, dim: float = 0.3) -> np.ndarray:
    """Part ``t`` in its colour over a dimmed grayscale copy of the whole canvas."""
    placed = np.asarray(placed, dtype=np.float64)
    base = np.clip(placed.sum(0), 0, 1)[..., None] * dim * np.ones(3)
    color = np.array(part_color(t)[1], dtype=np.float64) / 255.0
    mine = np.clip(placed[t], 0, 1)[..., None]
    return np.clip(base * (1 - mine) + color * mine, 0, 1)


def tile_grid(tiles: np.ndarray, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """(rows, cols, h, w) grayscale tiles -> one image with ``pad``-pixel separators."""
    rows, cols, h, w = tiles.shape
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill, dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            y, x = pad + r * (h + pad), pad + c * (w + pad)
            out[y:y + h, x:x + w] = np.clip(tiles[r, c], 0, 1)
    return out


def color_groups(rgb: np.ndarray, min_value: int = 16) -> set[str]:
    """Names of the palette colours present in an 8-bit RGB image.

    A pixel is assigned to the palette entry whose direction is closest; pixels
    dimmer than ``min_value`` in every channel count as background.
    """
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    lit = rgb[rgb.max(1) >= min_value]
    if not len(lit):
        return set()
    pal = np.array([c for _, c in PART_COLORS], dtype=np.float64)
    pal /= np.linalg.norm(pal, axis=1, keepdims=True)
    cos = (lit / np.linalg.norm(lit, axis=1, keepdims=True)) @ pal.T
    return {PART_COLORS[i][0] for i in np.unique(cos.argmax(1))}
