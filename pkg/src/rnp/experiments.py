"""Desk-scale experiment harnesses shared by ``scripts/`` and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SynthSpec, synth_strokes
from .model import RNP, ModelConfig, generate
from .tape import Tensor, no_tape
from .train import AdamState, TrainConfig, StepLog, evaluate, fit, param_digest

# noise seed of the fixed draws used to score the training objective before and after a run
EVAL_NOISE_SEED = 12345


@dataclass
class SmokeConfig:
    count: int = 256
    z_dim: int = 16
    tau: int = 3
    batch_size: int = 32
    lr: float = 4e-5
    steps: int = 300
    seed: int = 0


@dataclass
class SmokeResult:
    model: RNP
    history: list[StepLog]
    initial: dict[str, float]
    final: dict[str, float]
    seconds: float

    @property
    def ratio(self) -> float:
        return self.final["total"] / self.initial["total"]


def smoke_run(sc: SmokeConfig = SmokeConfig(), dataset: Dataset | None = None) -> SmokeResult:
    """Train on the synthetic corpus; the loss is scored on the whole corpus at fixed noise."""
    ds = dataset if dataset is not None else synth_strokes(SynthSpec(count=sc.count, seed=sc.seed))[0]
    model = RNP.init(ModelConfig(z_dim=sc.z_dim, tau2=sc.tau, tau1=sc.tau, seed=sc.seed))
    initial = evaluate(model, ds.images, noise_seed=EVAL_NOISE_SEED)
    t0 = time.perf_counter()
    _, hist = fit(model, ds, TrainConfig(lr=sc.lr, batch_size=sc.batch_size, epochs=10 ** 6,
                                         max_steps=sc.steps, seed=sc.seed))
    seconds = time.perf_counter() - t0
    final = evaluate(model, ds.images, noise_seed=EVAL_NOISE_SEED)
    return SmokeResult(model, hist, initial, final, seconds)


def prior_samples(model: RNP, n: int = 64, seed: int = 0) -> np.ndarray:
    """(n, H, W) canvases decoded from z2 ~ N(0, I)."""
    z = np.random.default_rng(seed).standard_normal((n, model.cfg.z_dim)).astype(np.float32)
    with no_tape():
        return generate(model.hyper, Tensor(z), model.cfg).level2.canvas.data


@dataclass
class MiniRunConfig:
    train: int = 2000
    heldout: int = 200
    z_dim: int = 32
    epochs: int = 5
    lr: float = 4e-5
    batch_size: int = 32
    seed: int = 0


@dataclass
class MiniRunResult:
    epoch_mse: list[float]
    constant_mse: float
    seconds: float
    model: RNP

    @property
    def non_monotone(self) -> int:
        return int(sum(b >= a for a, b in zip(self.epoch_mse, self.epoch_mse[1:])))


def split(ds: Dataset, n_train: int, n_heldout: int, seed: int) -> tuple[Dataset, Dataset]:
    if n_train + n_heldout > len(ds):
        raise ValueError(f"need {n_train + n_heldout} images, dataset has {len(ds)}")
    order = np.random.default_rng([seed, 99]).permutation(len(ds))
    return ds.subset(order[:n_train], "train"), ds.subset(order[n_train:n_train + n_heldout], "heldout")


def constant_predictor_mse(images: np.ndarray) -> float:
    """Per-pixel MSE of the best constant image for ``images``, which is their mean."""
    return float(np.mean((images - images.mean(0)) ** 2))


def mnist_minirun(ds: Dataset, mc: MiniRunConfig = MiniRunConfig()) -> MiniRunResult:
    """Held-out per-pixel MSE (posterior mean) after every epoch."""
    train, held = split(ds, mc.train, mc.heldout, mc.seed)
    model = RNP.init(ModelConfig(z_dim=mc.z_dim, seed=mc.seed))
    mse: list[float] = []
    t0 = time.perf_counter()
    fit(model, train, TrainConfig(lr=mc.lr, batch_size=mc.batch_size, epochs=mc.epochs, seed=mc.seed),
        callback=lambda epoch, m: mse.append(evaluate(m, held.images)["mse"]))
    return MiniRunResult(mse, constant_predictor_mse(held.images), time.perf_counter() - t0, model)


@dataclass
class TransferConfig:
    base_classes: tuple[int, ...] = (0, 1)
    novel_class: int = 2
    count: int = 384
    z_dim: int = 16
    tau: int = 3
    lr: float = 4e-5
    base_steps: int = 300
    finetune_steps: int = 150
    batch_size: int = 32
    seed: int = 0


@dataclass
class TransferResult:
    loss_before: float
    loss_after: float
    hyper_before: str
    hyper_after: str
    encoder_changed: bool
    extra: dict = field(default_factory=dict)

    @property
    def reduction(self) -> float:
        return 1.0 - self.loss_after / self.loss_before


def transfer_run(tc: TransferConfig = TransferConfig()) -> TransferResult:
    ds, _ = synth_strokes(SynthSpec(count=tc.count, seed=tc.seed))
    base = ds.where(np.isin(ds.labels, tc.base_classes), "base")
    novel = ds.where(ds.labels == tc.novel_class, "novel")
    model = RNP.init(ModelConfig(z_dim=tc.z_dim, tau2=tc.tau, tau1=tc.tau, seed=tc.seed))
    fit(model, base, TrainConfig(lr=tc.lr, batch_size=tc.batch_size, epochs=10 ** 6, max_steps=tc.base_steps,
                                 seed=tc.seed))
    before = evaluate(model, novel.images, noise_seed=EVAL_NOISE_SEED)["total"]
    hyper_before, enc_before = param_digest(model.hyper_params()), param_digest(model.encoder_params())
    fit(model, novel, TrainConfig(lr=tc.lr, batch_size=tc.batch_size, epochs=10 ** 6, max_steps=tc.finetune_steps,
                                  seed=tc.seed + 1, trainable="encoder"), state=AdamState(lr=tc.lr))
    after = evaluate(model, novel.images, noise_seed=EVAL_NOISE_SEED)["total"]
    return TransferResult(before, after, hyper_before, param_digest(model.hyper_params()),
                          enc_before != param_digest(model.encoder_params()))
