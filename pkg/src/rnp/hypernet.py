"""The shared hypernetwork: a trunk MLP over a program vector z whose seven
linear heads emit, by flat slicing, every weight of one level's primary nets.

Head order and contents::

    E        encoder MLP, (patch + 6) -> 64 -> 64 -> |z|
    state    f_state (W_h, W_x, b) and its initial hidden state
    policy   f_policy (W_h, W_x, b) and its initial hidden state
    D        patch decoder MLP, |z| -> 64 -> 64 -> patch, sigmoid
    T        action decoder MLP, |z| -> 64 -> 64 -> 6, linear
    x0       initial patch
    a0       initial raw action
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import ELU_GAIN, Dense, MlpWeights, RnnWeights, dense_apply, init_dense
from .stn import ACTION_DIM
from .tape import Tensor, ops

HEADS = ("E", "state", "policy", "D", "T", "x0", "a0")


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    offset: int  # within the flat parameter vector

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ParamLayout:
    z_dim: int
    patch_pixels: int
    hidden: int
    slots: tuple[Slot, ...]
    heads: tuple[tuple[str, int, int], ...]  # (head name, offset, size)

    @property
    def total(self) -> int:
        return sum(s.size for s in self.slots)

    def slot(self, name: str) -> Slot:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(name)


def _mlp_slots(prefix: str, dims: list[int]) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for i, (a, b) in enumerate(zip(dims, dims[1:]), start=1):
        out += [(f"{prefix}.W{i}", (a, b)), (f"{prefix}.b{i}", (b,))]
    return out


def layout(z_dim: int, patch_pixels: int = 144, hidden: int = 64) -> ParamLayout:
    if z_dim < 1:
        raise ValueError(f"z_dim must be >= 1, got {z_dim}")
    z, p, h = z_dim, patch_pixels, hidden
    groups = {
        "E": _mlp_slots("E", [p + ACTION_DIM, h, h, z]),
        "state": [("f_state.W_h", (z, z)), ("f_state.W_x", (z, z)), ("f_state.b", (z,)), ("h0_state", (z,))],
        "policy": [("f_policy.W_h", (z, z)), ("f_policy.W_x", (z, z)), ("f_policy.b", (z,)), ("h0_policy", (z,))],
        "D": _mlp_slots("D", [z, h, h, p]),
        "T": _mlp_slots("T", [z, h, h, ACTION_DIM]),
        "x0": [("x0", (p,))],
        "a0": [("a0", (ACTION_DIM,))],
    }
    slots, heads, off = [], [], 0
    for head in HEADS:
        start = off
        for name, shape in groups[head]:
            slots.append(Slot(name, shape, off))
            off += int(np.prod(shape))
        heads.append((head, start, off - start))
    return ParamLayout(z, p, h, tuple(slots), tuple(heads))


@dataclass
class PrimaryNets:
    """One program's networks; every tensor has a leading batch axis."""

    E: MlpWeights
    f_state: RnnWeights
    f_policy: RnnWeights
    h0_state: Tensor
    h0_policy: Tensor
    D: MlpWeights
    T: MlpWeights
    x0: Tensor
    a0: Tensor

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mlp in (("E", self.E), ("D", self.D), ("T", self.T)):
            for i, layer in enumerate(mlp.layers, start=1):
                out[f"{prefix}.W{i}"] = layer.W
                out[f"{prefix}.b{i}"] = layer.b
        for tag, rnn in (("state", self.f_state), ("policy", self.f_policy)):
            out[f"f_{tag}.W_h"], out[f"f_{tag}.W_x"], out[f"f_{tag}.b"] = rnn.W_h, rnn.W_x, rnn.b
        out["h0_state"], out["h0_policy"] = self.h0_state, self.h0_policy
        out["x0"], out["a0"] = self.x0, self.a0
        return out


@dataclass
class HyperWeights:
    trunk: list[Dense]
    heads: dict[str, Dense]
    layout: ParamLayout

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.trunk):
            out[f"hyper.trunk{i}.W"], out[f"hyper.trunk{i}.b"] = layer.W, layer.b
        for head in HEADS:
            out[f"hyper.head_{head}.W"], out[f"hyper.head_{head}.b"] = self.heads[head].W, self.heads[head].b
        return out


def init_hyper(rng: np.random.Generator, z_dim: int, patch_pixels: int = 144, hidden: int = 64,
               trunk_layers: int = 6, head_scale: float = 0.01, primary_gain: float = 1.0,
               dtype=np.float32) -> HyperWeights:
    """Trunk gets fan-in init.  Head weights are fan-in init times ``head_scale``;
    head biases hold a fan-in init of the primary weights themselves, so the
    generated nets start as ordinary randomly initialised networks."""
    lay = layout(z_dim, patch_pixels, hidden)
    dims = [z_dim] + [hidden] * trunk_layers
    trunk = [init_dense(rng, a, b, dtype, gain=ELU_GAIN) for a, b in zip(dims, dims[1:])]
    heads = {}
    for head, off, size in lay.heads:
        d = init_dense(rng, hidden, size, dtype, gain=head_scale)
        base = np.zeros(size)
        for s in lay.slots:
            if s.offset < off or s.offset >= off + size:
                continue
            if len(s.shape) == 2:
                base[s.offset - off: s.offset - off + s.size] = \
                    rng.standard_normal(s.size) * (primary_gain / np.sqrt(s.shape[0]))
        d.b.data[:] = base.astype(dtype)
        heads[head] = d
    return HyperWeights(trunk, heads, lay)


def trunk_apply(hw: HyperWeights, z: Tensor) -> Tensor:
    h = z
    for layer in hw.trunk:
        h = ops.elu(dense_apply(layer, h))
    return h


def generate_primary(hw: HyperWeights, z: Tensor) -> PrimaryNets:
    """z: (B, |z|) -> per-sample primary networks."""
    if z.ndim == 1:
        z = ops.reshape(z, (1, -1))
    lay = hw.layout
    if z.shape[-1] != lay.z_dim:
        raise ValueError(f"hypernetwork expects |z| = {lay.z_dim}, got {z.shape}")
    B = z.shape[0]
    h = trunk_apply(hw, z)
    t: dict[str, Tensor] = {}
    for head, off, size in lay.heads:
        flat = dense_apply(hw.heads[head], h)
        for s in lay.slots:
            if off <= s.offset < off + size:
                lo = s.offset - off
                piece = ops.slice(flat, (slice(None), slice(lo, lo + s.size)))
                t[s.name] = ops.reshape(piece, (B,) + s.shape)

    def mlp(prefix, final):
        return MlpWeights([Dense(t[f"{prefix}.W{i}"], t[f"{prefix}.b{i}"]) for i in (1, 2, 3)], final=final)

    return PrimaryNets(
        E=mlp("E", "linear"),
        f_state=RnnWeights(t["f_state.W_h"], t["f_state.W_x"], t["f_state.b"]),
        f_policy=RnnWeights(t["f_policy.W_h"], t["f_policy.W_x"], t["f_policy.b"]),
        h0_state=t["h0_state"], h0_policy=t["h0_policy"],
        D=mlp("D", "sigmoid"), T=mlp("T", "linear"),
        x0=t["x0"], a0=t["a0"],
    )


def flatten_primary(nets: PrimaryNets, lay: ParamLayout) -> np.ndarray:
    """(B, total) array laid out exactly as the concatenated head outputs."""
    t = nets.tensors()
    B = nets.x0.shape[0]
    return np.concatenate([t[s.name].data.reshape(B, -1) for s in lay.slots], axis=1)


def count_primary(nets: PrimaryNets) -> int:
    """Number of generated parameters per sample."""
    return sum(int(np.prod(v.shape[1:])) for v in nets.tensors().values())
