"""Two-level recursive neural program: inference, depth-first generation, loss."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .hypernet import HyperWeights, PrimaryNets, generate_primary, init_hyper
from .nets import EncoderWeights, encoder_apply, encoder_named, init_encoder, mlp_apply, rnn_step
from .stn import AffineAction, LevelGeometry, extract_patch, squash_action, warp
from .tape import Tensor, ops


@dataclass
class ModelConfig:
    z_dim: int = 32
    tau2: int = 4
    tau1: int = 4
    image_size: int = 28
    patch_size: int = 12
    beta: float = 1.0
    seed: int = 0
    theta_max: float = math.pi / 4
    shear_max: float = 0.5
    hidden: int = 64
    trunk_layers: int = 6
    head_scale: float = 0.01
    enc_channels: int = 32
    enc_blocks: int = 5
    enc_fc: int = 4

    def __post_init__(self):
        if self.tau2 < 1 or self.tau1 < 1:
            raise ValueError("tau2 and tau1 must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.z_dim < 1:
            raise ValueError("z_dim must be >= 1")

    @property
    def level2(self) -> LevelGeometry:
        return LevelGeometry.parts(self.image_size, self.patch_size,
                                   theta_max=self.theta_max, shear_max=self.shear_max)

    @property
    def level1(self) -> LevelGeometry:
        return LevelGeometry.subparts(self.patch_size, theta_max=self.theta_max, shear_max=self.shear_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        """Gradient-check scale: 14 px images, 6 px patches, |z| = 8, two steps per level."""
        base = dict(z_dim=8, tau2=2, tau1=2, image_size=14, patch_size=6)
        base.update(kw)
        return cls(**base)


@dataclass
class RNP:
    cfg: ModelConfig
    encoder: EncoderWeights
    hyper: HyperWeights  # one set, shared by both levels

    @classmethod
    def init(cls, cfg: ModelConfig, dtype=np.float32) -> "RNP":
        rng = np.random.default_rng(cfg.seed)
        enc = init_encoder(rng, cfg.z_dim, cfg.image_size, cfg.enc_channels, cfg.enc_blocks,
                           fc_layers=cfg.enc_fc, fc_width=cfg.hidden, dtype=dtype)
        hyper = init_hyper(rng, cfg.z_dim, cfg.patch_size ** 2, cfg.hidden, cfg.trunk_layers,
                           head_scale=cfg.head_scale, dtype=dtype)
        return cls(cfg, enc, hyper)

    def encoder_params(self) -> dict[str, Tensor]:
        return encoder_named(self.encoder)

    def hyper_params(self) -> dict[str, Tensor]:
        return self.hyper.named()

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.encoder_params(), **self.hyper_params()}

    def astype(self, dtype) -> "RNP":
        """Deep copy at another precision (the gradient-check suites run at float64)."""
        other = RNP.init(self.cfg, dtype=dtype)
        for (name, dst), src in zip(other.named_parameters().items(), self.named_parameters().values()):
            dst.data = src.data.astype(dtype)
        return other


@dataclass
class LevelTrace:
    states: list[Tensor] = field(default_factory=list)  # z_t, (B, |z|)
    raw_actions: list[Tensor] = field(default_factory=list)  # (B, 6)
    actions: list[AffineAction] = field(default_factory=list)
    patches: list[Tensor] = field(default_factory=list)  # what got placed, (B, P, P)
    placed: list[Tensor] = field(default_factory=list)  # warped patches, (B, C, C)
    decoded: list[Tensor] = field(default_factory=list)  # D(z_t) when patches come from children
    canvas: Tensor | None = None
    nets: PrimaryNets | None = None

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class ParseTree:
    z2: Tensor
    level2: LevelTrace
    level1: list[LevelTrace]
    mu: Tensor | None = None
    logvar: Tensor | None = None

    @property
    def image(self) -> Tensor:
        return self.level2.canvas


def encode(w: EncoderWeights, x: Tensor) -> tuple[Tensor, Tensor]:
    return encoder_apply(w, x)


def sample_latent(mu: Tensor, logvar: Tensor, noise) -> Tensor:
    """Reparameterised draw mu + exp(logvar / 2) * noise; noise comes from the caller."""
    return ops.add(mu, ops.mul(ops.exp(ops.mul(logvar, 0.5)), noise))


def _finite(t: Tensor, what: str, step: int) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite {what} at step {step}")


def unroll_level(hw: HyperWeights, z: Tensor, geom: LevelGeometry, tau: int,
                 child: tuple[LevelGeometry, int] | None = None) -> tuple[LevelTrace, list[LevelTrace]]:
    """Run one program for ``tau`` steps.

    With ``child`` set, every step's state is itself unrolled one level down and
    the resulting child canvas is what gets placed (and fed back next step).
    """
    if z.ndim == 1:
        z = ops.reshape(z, (1, -1))
    _finite(z, "program state", 0)
    nets = generate_primary(hw, z)
    B, P = z.shape[0], geom.patch_size
    if child is not None and child[0].canvas_size != P:
        raise ValueError(f"child canvas {child[0].canvas_size} must equal parent patch size {P}")
    if nets.x0.shape[1] != P * P:
        raise ValueError(f"hypernetwork emits {nets.x0.shape[1]}-pixel patches, geometry needs {P}x{P}")
    trace = LevelTrace(nets=nets)
    children: list[LevelTrace] = []
    h_s, h_p = nets.h0_state, nets.h0_policy
    feedback = nets.x0
    action = squash_action(nets.a0, geom)
    for t in range(tau):
        e = mlp_apply(nets.E, ops.concat([feedback, action.stacked()], axis=1))
        h_s = rnn_step(nets.f_state, h_s, e)
        h_p = rnn_step(nets.f_policy, h_p, e)
        raw = mlp_apply(nets.T, h_p)
        action = squash_action(raw, geom)
        if child is None:
            patch = ops.reshape(mlp_apply(nets.D, h_s), (B, P, P))
        else:
            trace.decoded.append(ops.reshape(mlp_apply(nets.D, h_s), (B, P, P)))
            sub, _ = unroll_level(hw, h_s, child[0], child[1])
            children.append(sub)
            patch = sub.canvas
        placed = warp(patch, action, geom.canvas_size)
        trace.canvas = placed if trace.canvas is None else ops.add(trace.canvas, placed)
        _finite(trace.canvas, "canvas", t + 1)
        trace.states.append(h_s)
        trace.raw_actions.append(raw)
        trace.actions.append(action)
        trace.patches.append(patch)
        trace.placed.append(placed)
        feedback = ops.reshape(patch, (B, P * P))
    return trace, children


def generate(hw: HyperWeights, z2: Tensor, cfg: ModelConfig) -> ParseTree:
    """Depth-first two-level generation from top-level programs (B, |z|)."""
    if z2.ndim == 1:
        z2 = ops.reshape(z2, (1, -1))
    top, parts = unroll_level(hw, z2, cfg.level2, cfg.tau2, child=(cfg.level1, cfg.tau1))
    return ParseTree(z2=z2, level2=top, level1=parts)


def infer(model: RNP, x: Tensor, noise=None) -> ParseTree:
    """Encode, draw z2 (noise=None means the posterior mean), generate."""
    if x.ndim == 2:
        x = ops.reshape(x, (1,) + x.shape)
    mu, logvar = encode(model.encoder, x)
    if noise is None:
        noise = np.zeros(mu.shape, dtype=mu.dtype)
    z2 = sample_latent(mu, logvar, np.asarray(noise, dtype=mu.dtype))
    tree = generate(model.hyper, z2, model.cfg)
    tree.mu, tree.logvar = mu, logvar
    return tree


def loss_terms(tree: ParseTree, x: Tensor, cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Per-sample (recon, part_reg, kl), each (B,)."""
    if x.ndim == 2:
        x = ops.reshape(x, (1,) + x.shape)
    canvas = tree.level2.canvas
    if canvas.shape != x.shape:
        raise ValueError(f"canvas {canvas.shape} and target {x.shape} differ")
    recon = ops.sum(ops.square(ops.add(canvas, ops.neg(x))), axis=(1, 2))
    P = cfg.patch_size
    part_reg = None
    for decoded, action in zip(tree.level2.decoded, tree.level2.actions):
        target = extract_patch(x, action, P)
        err = ops.sum(ops.square(ops.add(decoded, ops.neg(target))), axis=(1, 2))
        part_reg = err if part_reg is None else ops.add(part_reg, err)
    part_reg = ops.mul(part_reg, 1.0 / len(tree.level2.decoded))
    if tree.mu is None:
        kl = Tensor(np.zeros(x.shape[0], dtype=x.dtype))
    else:
        mu, lv = tree.mu, tree.logvar
        inner = ops.add(ops.add(1.0, lv), ops.neg(ops.add(ops.square(mu), ops.exp(lv))))
        kl = ops.mul(ops.sum(inner, axis=1), -0.5)
    return recon, part_reg, kl


def total_loss(terms: tuple[Tensor, Tensor, Tensor], beta: float) -> Tensor:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    recon, part_reg, kl = terms
    per = ops.add(ops.add(recon, part_reg), ops.mul(kl, beta))
    return ops.mean(per)


def model_loss(model: RNP, x: Tensor, noise=None) -> tuple[Tensor, tuple[Tensor, Tensor, Tensor]]:
    tree = infer(model, x, noise)
    terms = loss_terms(tree, x, model.cfg)
    return total_loss(terms, model.cfg.beta), terms
