"""Stateless evaluators for the primary networks.

Weights are always passed in.  Dense layers use the row-vector convention
``y = x @ W + b`` with ``W`` of shape (in, out).  A weight may carry a leading
batch axis (B, in, out) when it was generated per sample by the hypernetwork.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Tensor, ops

ACTIVATIONS = {
    "elu": ops.elu,
    "sigmoid": ops.sigmoid,
    "tanh": ops.tanh,
    "linear": lambda x: x,
}


@dataclass
class Dense:
    W: Tensor
    b: Tensor

    @property
    def dims(self) -> tuple[int, int]:
        return self.W.shape[-2], self.W.shape[-1]


@dataclass
class MlpWeights:
    layers: list[Dense]
    final: str = "linear"

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.dims[1] != nxt.dims[0]:
                raise ValueError(f"layer dims do not chain: {prev.dims} -> {nxt.dims}")
        if self.final not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.final!r}")


@dataclass
class RnnWeights:
    W_h: Tensor  # (|z|, |z|)
    W_x: Tensor  # (d_in, |z|)
    b: Tensor  # (|z|,)


@dataclass
class ResBlock:
    conv1: Tensor
    b1: Tensor
    conv2: Tensor
    b2: Tensor
    stride: int = 1
    proj: Tensor | None = None  # 1x1 strided projection on the skip path


@dataclass
class EncoderWeights:
    blocks: list[ResBlock]
    fc: list[Dense]
    mu: Dense
    logvar: Dense
    image_size: int = 28

    @property
    def z_dim(self) -> int:
        return self.mu.dims[1]


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return ops.reshape(x, (1, -1)), True
    return x, False


def dense_apply(layer: Dense, x: Tensor) -> Tensor:
    """x: (B, in).  Shared weights (in, out) or per-sample weights (B, in, out)."""
    n_in, n_out = layer.dims
    if x.shape[-1] != n_in:
        raise ValueError(f"dense layer expects input dim {n_in}, got {x.shape}")
    if layer.W.ndim == 2:
        return ops.add(ops.matmul(x, layer.W), layer.b)
    B = x.shape[0]
    y = ops.matmul(ops.reshape(x, (B, 1, n_in)), layer.W)
    return ops.add(ops.reshape(y, (B, n_out)), layer.b)


def mlp_apply(w: MlpWeights, x: Tensor) -> Tensor:
    """elu on hidden layers, ``w.final`` on the last."""
    x, single = _as_batch(x)
    for i, layer in enumerate(w.layers):
        x = dense_apply(layer, x)
        act = w.final if i == len(w.layers) - 1 else "elu"
        x = ACTIVATIONS[act](x)
    return ops.reshape(x, (-1,)) if single else x


def rnn_step(w: RnnWeights, h: Tensor, x: Tensor) -> Tensor:
    """Vanilla tanh cell: h' = tanh(h W_h + x W_x + b)."""
    h, single = _as_batch(h)
    x, _ = _as_batch(x)
    z = w.W_h.shape[-1]
    if h.shape[-1] != z or w.W_h.shape[-2] != z or x.shape[-1] != w.W_x.shape[-2]:
        raise ValueError(f"rnn_step: hidden {h.shape}, input {x.shape} vs W_h {w.W_h.shape}, W_x {w.W_x.shape}")
    pre = ops.add(dense_apply(Dense(w.W_h, w.b), h), dense_apply(Dense(w.W_x, np.zeros((), h.dtype)), x))
    out = ops.tanh(pre)
    return ops.reshape(out, (-1,)) if single else out


def _block_apply(blk: ResBlock, x: Tensor) -> Tensor:
    h = ops.conv2d(x, blk.conv1, stride=blk.stride, pad=1)
    h = ops.elu(ops.add(h, ops.reshape(blk.b1, (1, -1, 1, 1))))
    h = ops.conv2d(h, blk.conv2, stride=1, pad=1)
    h = ops.add(h, ops.reshape(blk.b2, (1, -1, 1, 1)))
    skip = x if blk.proj is None else ops.conv2d(x, blk.proj, stride=blk.stride, pad=0)
    return ops.elu(ops.add(skip, h))


def encoder_apply(w: EncoderWeights, image: Tensor) -> tuple[Tensor, Tensor]:
    """Residual conv encoder -> (mu, logvar), each (B, |z|)."""
    if image.ndim == 2:
        image = ops.reshape(image, (1,) + image.shape)
    n = w.image_size
    if image.shape[1:] != (n, n):
        raise ValueError(f"encoder expects {n}x{n} images, got {image.shape}")
    x = ops.reshape(image, (image.shape[0], 1, n, n))
    for blk in w.blocks:
        x = _block_apply(blk, x)
    x = ops.reshape(x, (x.shape[0], -1))
    for layer in w.fc:
        x = ops.elu(dense_apply(layer, x))
    return dense_apply(w.mu, x), dense_apply(w.logvar, x)


def encoder_output_size(image_size: int, n_blocks: int, downsample: tuple[int, ...]) -> int:
    n = image_size
    for i in range(n_blocks):
        if i in downsample:
            n = (n - 1) // 2 + 1
    return n


# fan-in init gain for layers feeding an elu
ELU_GAIN = float(np.sqrt(2.0))


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, dtype=np.float32, gain: float = 1.0) -> Dense:
    W = rng.standard_normal((n_in, n_out)) * (gain / np.sqrt(n_in))
    return Dense(Tensor(W.astype(dtype), requires_grad=True), Tensor(np.zeros(n_out, dtype), requires_grad=True))


def init_encoder(rng: np.random.Generator, z_dim: int, image_size: int = 28, channels: int = 32,
                 n_blocks: int = 5, downsample: tuple[int, ...] = (0, 2), fc_layers: int = 4,
                 fc_width: int = 64, dtype=np.float32) -> EncoderWeights:
    def conv(cout, cin, k):
        w = rng.standard_normal((cout, cin, k, k)) / np.sqrt(cin * k * k)
        return Tensor(w.astype(dtype), requires_grad=True)

    blocks = []
    cin = 1
    for i in range(n_blocks):
        stride = 2 if i in downsample else 1
        proj = conv(channels, cin, 1) if (stride != 1 or cin != channels) else None
        blocks.append(ResBlock(conv(channels, cin, 3), Tensor(np.zeros(channels, dtype), requires_grad=True),
                               conv(channels, channels, 3), Tensor(np.zeros(channels, dtype), requires_grad=True),
                               stride=stride, proj=proj))
        cin = channels
    side = encoder_output_size(image_size, n_blocks, downsample)
    dims = [channels * side * side] + [fc_width] * fc_layers
    fc = [init_dense(rng, a, b, dtype) for a, b in zip(dims, dims[1:])]
    mu = init_dense(rng, fc_width, z_dim, dtype)
    logvar = init_dense(rng, fc_width, z_dim, dtype, gain=0.1)
    return EncoderWeights(blocks, fc, mu, logvar, image_size=image_size)


def encoder_named(w: EncoderWeights) -> dict[str, Tensor]:
    """Flat, ordered name -> tensor view of every encoder parameter."""
    out: dict[str, Tensor] = {}
    for i, blk in enumerate(w.blocks):
        out[f"enc.block{i}.conv1"] = blk.conv1
        out[f"enc.block{i}.b1"] = blk.b1
        out[f"enc.block{i}.conv2"] = blk.conv2
        out[f"enc.block{i}.b2"] = blk.b2
        if blk.proj is not None:
            out[f"enc.block{i}.proj"] = blk.proj
    for i, layer in enumerate(w.fc):
        out[f"enc.fc{i}.W"] = layer.W
        out[f"enc.fc{i}.b"] = layer.b
    out["enc.mu.W"], out["enc.mu.b"] = w.mu.W, w.mu.b
    out["enc.logvar.W"], out["enc.logvar.b"] = w.logvar.W, w.logvar.b
    return out
