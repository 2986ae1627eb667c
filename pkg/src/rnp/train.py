"""Adam training loop, encoder-only transfer mode, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"RNP1"
    u32 config length, UTF-8 JSON config (sorted keys)
    u32 number of arrays
    per array: u16 name length, name, u8 ndim, u32 dims..., float32 data
    u32 CRC32 of everything above
"""
from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, epoch_order
from .model import RNP, ModelConfig, model_loss
from .tape import Tape, Tensor

log = logging.getLogger(__name__)

MAGIC = b"RNP1"


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class CRCMismatch(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, last_good: RNP | None = None):
        super().__init__(msg)
        self.last_good = last_good


# --- Adam ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    """In-place bias-corrected Adam update of every parameter named in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return norm


# --- checkpoints ---------------------------------------------------------

def dumps(model: RNP, extra: dict | None = None) -> bytes:
    cfg = {"model": model.cfg.to_dict(), "level2": model.cfg.level2.to_dict(),
           "level1": model.cfg.level1.to_dict(), **(extra or {})}
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(blob)), blob]
    params = model.named_parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, t in params.items():
        key = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts += [struct.pack("<H", len(key)), key, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(buf: bytes) -> tuple[RNP, dict]:
    if buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise CheckpointError("truncated checkpoint")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CRCMismatch("checkpoint CRC32 does not match contents")
    pos = 4
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    meta = json.loads(body[pos:pos + n].decode("utf-8"))
    pos += n
    cfg = ModelConfig.from_dict(meta["model"])
    model = RNP.init(cfg)
    params = model.named_parameters()
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if count != len(params):
        raise ShapeMismatch(f"checkpoint holds {count} arrays, config implies {len(params)}")
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 4
        if name not in params:
            raise ShapeMismatch(f"unexpected array {name!r}")
        if tuple(shape) != params[name].shape:
            raise ShapeMismatch(f"{name}: stored shape {tuple(shape)}, config implies {params[name].shape}")
        params[name].data = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(shape) \
            .astype(np.float32)
        pos += size
    return model, meta


def save_checkpoint(model: RNP, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, extra))


def load_checkpoint(path) -> tuple[RNP, dict]:
    return loads(Path(path).read_bytes())


def param_digest(params: dict[str, Tensor]) -> str:
    """CRC32 hex over the raw bytes of the given parameters, in order."""
    crc = 0
    for name, t in params.items():
        crc = zlib.crc32(name.encode() + np.ascontiguousarray(t.data).tobytes(), crc)
    return f"{crc:08x}"


# --- training ------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 4e-5
    batch_size: int = 32
    epochs: int = 20
    max_steps: int | None = None
    clip_norm: float = 10.0
    seed: int = 0
    trainable: str = "all"  # or "encoder"
    metrics_path: str | None = None
    checkpoint_path: str | None = None


@dataclass
class StepLog:
    step: int
    recon: float
    part_reg: float
    kl: float
    total: float


def train_step(model: RNP, x: np.ndarray, noise: np.ndarray, state: AdamState, trainable: str = "all",
               clip_norm: float = 10.0) -> StepLog:
    params = model.encoder_params() if trainable == "encoder" else model.named_parameters()
    with Tape() as tape:
        loss, (recon, part, kl) = model_loss(model, Tensor(x), noise)
    if not np.isfinite(loss.item()):
        raise FloatingPointError("loss is not finite")
    leaf_grads = tape.backward(loss, wrt=list(params.values()))
    grads = {name: leaf_grads[t] for name, t in params.items()}
    clip_global_norm(grads, clip_norm)
    adam_step(state, params, grads)
    return StepLog(state.step, float(recon.data.mean()), float(part.data.mean()), float(kl.data.mean()),
                   loss.item())


def _snapshot(model: RNP) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.named_parameters().items()}


def _restore(model: RNP, snap: dict[str, np.ndarray]) -> None:
    for k, v in model.named_parameters().items():
        v.data = snap[k]


def fit(model: RNP, dataset: Dataset, tc: TrainConfig, state: AdamState | None = None,
        callback=None) -> tuple[RNP, list[StepLog]]:
    """Train in place.  ``tc.trainable='encoder'`` freezes the hypernetwork.

    ``callback(epoch, model)`` runs after every epoch.  On a non-finite loss the
    model is rolled back to the last good step and ``TrainingDiverged`` raised.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if tc.trainable not in ("all", "encoder"):
        raise ValueError(f"trainable must be 'all' or 'encoder', got {tc.trainable!r}")
    state = state or AdamState(lr=tc.lr)
    noise_rng = np.random.default_rng([tc.seed, 1])
    history: list[StepLog] = []
    writer = fh = None
    if tc.metrics_path:
        fh = open(tc.metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "recon", "part_reg", "kl", "total"])
    good = _snapshot(model)
    try:
        done = False
        epoch = 0
        while not done and epoch < tc.epochs:
            order = epoch_order(len(dataset), tc.seed, epoch)
            for lo in range(0, len(dataset), tc.batch_size):
                if tc.max_steps is not None and state.step >= tc.max_steps:
                    done = True
                    break
                x = dataset.images[order[lo:lo + tc.batch_size]]
                noise = noise_rng.standard_normal((len(x), model.cfg.z_dim)).astype(np.float32)
                try:
                    entry = train_step(model, x, noise, state, tc.trainable, tc.clip_norm)
                except FloatingPointError as exc:
                    _restore(model, good)
                    if tc.checkpoint_path:
                        save_checkpoint(model, tc.checkpoint_path)
                    raise TrainingDiverged(f"diverged at step {state.step + 1}: {exc}", model) from exc
                good = _snapshot(model)
                history.append(entry)
                if writer:
                    writer.writerow([entry.step, f"{entry.recon:.9g}", f"{entry.part_reg:.9g}",
                                     f"{entry.kl:.9g}", f"{entry.total:.9g}"])
                if entry.step % 50 == 0:
                    log.info("step %d loss %.4f", entry.step, entry.total)
            epoch += 1
            if callback is not None:
                callback(epoch, model)
    finally:
        if fh:
            fh.close()
    if tc.checkpoint_path:
        save_checkpoint(model, tc.checkpoint_path, {"dataset": dataset.name, "seed": tc.seed})
    return model, history


def evaluate(model: RNP, images: np.ndarray, batch_size: int = 64, noise_seed: int | None = None) -> dict[str, float]:
    """Mean loss terms and per-pixel MSE over ``images``.

    With ``noise_seed`` unset z2 is the posterior mean.  Otherwise z2 is drawn
    with standard normal noise from that seed, which gives the training
    objective itself under draws that repeat exactly from call to call.
    """
    tot = {"recon": 0.0, "part_reg": 0.0, "kl": 0.0, "total": 0.0, "mse": 0.0}
    rng = None if noise_seed is None else np.random.default_rng(noise_seed)
    for lo in range(0, len(images), batch_size):
        x = images[lo:lo + batch_size]
        noise = None if rng is None else rng.standard_normal((len(x), model.cfg.z_dim)).astype(np.float32)
        loss, (recon, part, kl) = model_loss(model, Tensor(x), noise)
        n = len(x)
        tot["recon"] += float(recon.data.sum())
        tot["part_reg"] += float(part.data.sum())
        tot["kl"] += float(kl.data.sum())
        tot["total"] += loss.item() * n
        tot["mse"] += float(recon.data.sum()) / x[0].size
    return {k: v / len(images) for k, v in tot.items()}
