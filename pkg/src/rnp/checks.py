"""Float64 finite-difference gradient suites, shared by the tests and ``rnp gradcheck``."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import RNP, ModelConfig, model_loss
from .stn import LevelGeometry, extract_patch, squash_action, warp
from .tape import Tape, Tensor, grad_check, ops

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """name -> (scalar function of one tensor, input) covering every recorded op."""
    w = rng.standard_normal(size=(4, 3))
    bvec = rng.standard_normal(3)
    probe = rng.standard_normal((2, 5, 3))
    img = rng.random((2, 5, 6))
    # sample points strictly between pixel centres
    u = rng.integers(0, 5, (2, 7)) + rng.uniform(0.2, 0.8, (2, 7))
    v = rng.integers(0, 4, (2, 7)) + rng.uniform(0.2, 0.8, (2, 7))
    coords = np.stack([(2 * u + 1) / 6 - 1, (2 * v + 1) / 5 - 1], axis=-1)
    kernel = rng.standard_normal((3, 2, 3, 3))
    conv_in = rng.standard_normal((2, 2, 4, 4))
    fixed: dict[tuple, np.ndarray] = {}

    def weigh(t: Tensor) -> Tensor:
        # one frozen random weighting per output shape
        if t.shape not in fixed:
            fixed[t.shape] = rng.standard_normal(t.shape)
        return ops.sum(ops.mul(t, fixed[t.shape]))

    return {
        "matmul": (lambda x: weigh(ops.matmul(x, w)), rng.standard_normal((2, 5, 4))),
        "add": (lambda x: weigh(ops.add(x, bvec)), rng.standard_normal((5, 3))),
        "mul": (lambda x: ops.sum(ops.mul(x, probe)), rng.standard_normal((5, 3))),
        "elu": (lambda x: weigh(ops.elu(x)), _away_from_zero(rng, (10,))),
        "tanh": (lambda x: weigh(ops.tanh(x)), rng.standard_normal(10)),
        "sigmoid": (lambda x: weigh(ops.sigmoid(x)), rng.standard_normal(10) * 3),
        "exp": (lambda x: weigh(ops.exp(x)), rng.standard_normal(10)),
        "sin": (lambda x: weigh(ops.sin(x)), rng.standard_normal(10)),
        "cos": (lambda x: weigh(ops.cos(x)), rng.standard_normal(10)),
        "reciprocal": (lambda x: weigh(ops.reciprocal(x)), _away_from_zero(rng, (10,), 0.5, 2.0)),
        "square": (lambda x: weigh(ops.square(x)), rng.standard_normal(10)),
        "sum": (lambda x: weigh(ops.sum(x, axis=1)), rng.standard_normal((3, 4))),
        "mean": (lambda x: weigh(ops.mean(x, axis=0, keepdims=True)), rng.standard_normal((3, 4))),
        "concat": (lambda x: weigh(ops.concat([x, ops.square(x)], axis=1)), rng.standard_normal((3, 2))),
        "slice": (lambda x: weigh(ops.slice(x, (slice(None), slice(1, 3)))), rng.standard_normal((3, 4))),
        "reshape": (lambda x: weigh(ops.reshape(x, (2, 6))), rng.standard_normal((3, 4))),
        "bilinear_sample[image]": (lambda x: weigh(ops.bilinear_sample(x, coords)), img),
        "bilinear_sample[coords]": (lambda x: weigh(ops.bilinear_sample(img, x)), coords),
        "conv2d[input]": (lambda x: weigh(ops.conv2d(x, kernel, stride=2, pad=1)), rng.standard_normal((2, 2, 5, 5))),
        "conv2d[kernel]": (lambda x: weigh(ops.conv2d(conv_in, x, stride=1, pad=1)), kernel),
    }


def primitive_suite(seed: int = 0, eps: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (f, x) in primitive_cases(rng).items():
        out.append(CheckResult(name, grad_check(f, Tensor(np.asarray(x, dtype=np.float64)), eps), PRIMITIVE_TOL))
    return out


def stn_suite(seed: int = 0, eps: float = 1e-4, trials: int = 3) -> list[CheckResult]:
    """warp / extract_patch gradients w.r.t. image and raw action at random actions."""
    rng = np.random.default_rng(seed)
    geom = LevelGeometry.parts(14, 6)
    out = []
    for k in range(trials):
        raw = rng.uniform(-1.5, 1.5, (2, 6))
        patch = rng.random((2, 6, 6))
        image = rng.random((2, 14, 14))
        wp = rng.standard_normal((2, 14, 14))
        we = rng.standard_normal((2, 6, 6))
        f_wp = lambda p: ops.sum(ops.mul(warp(p, squash_action(Tensor(raw), geom), 14), wp))
        f_wa = lambda r: ops.sum(ops.mul(warp(Tensor(patch), squash_action(r, geom), 14), wp))
        f_ei = lambda im: ops.sum(ops.mul(extract_patch(im, squash_action(Tensor(raw), geom), 6), we))
        f_ea = lambda r: ops.sum(ops.mul(extract_patch(Tensor(image), squash_action(r, geom), 6), we))
        out += [
            CheckResult(f"warp[patch]#{k}", grad_check(f_wp, Tensor(patch), eps), COMPOSITE_TOL),
            CheckResult(f"warp[action]#{k}", grad_check(f_wa, Tensor(raw), eps), COMPOSITE_TOL),
            CheckResult(f"extract[image]#{k}", grad_check(f_ei, Tensor(image), eps), COMPOSITE_TOL),
            CheckResult(f"extract[action]#{k}", grad_check(f_ea, Tensor(raw), eps), COMPOSITE_TOL),
        ]
    return out


def model_suite(seed: int = 0, eps: float = 1e-5, coords_per_tensor: int = 3, batch: int = 2,
                cfg: ModelConfig | None = None) -> list[CheckResult]:
    """total_loss w.r.t. every trainable tensor of a tiny float64 model.

    ``coords_per_tensor`` randomly chosen entries of each tensor are perturbed.
    """
    cfg = cfg or ModelConfig.tiny(seed=seed)
    model = RNP.init(cfg, dtype=np.float64)
    rng = np.random.default_rng([seed, 7])
    x = rng.random((batch, cfg.image_size, cfg.image_size))
    noise = rng.standard_normal((batch, cfg.z_dim))
    params = model.named_parameters()

    def loss() -> Tensor:
        return model_loss(model, Tensor(x), noise)[0]

    with Tape() as tape:
        L = loss()
    grads = tape.backward(L, wrt=list(params.values()))
    out = []
    for name, p in params.items():
        g = grads[p].ravel()
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss().item()
            flat[i] = orig - eps
            fm = loss().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                worst = np.inf
                break
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(g[i] - num) / max(1e-8, abs(g[i]) + abs(num)))
        out.append(CheckResult(f"loss[{name}]", worst, COMPOSITE_TOL))
    return out


def run_all(seed: int = 0) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    results = primitive_suite(seed) + stn_suite(seed) + model_suite(seed)
    return results, time.perf_counter() - t0
