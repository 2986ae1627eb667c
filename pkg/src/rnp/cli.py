"""Command line for recursive neural programs: train, parse, sample, interpolate, transfer, export-latents, gradcheck.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checks import run_all
from .data import Dataset, IdxError, SynthSpec, load_idx, synth_strokes
from .model import RNP, ModelConfig, encode, generate, infer
from .render import overlay, part_color, part_overlay, save_png, tile_grid
from .tape import Tensor, no_tape
from .train import (CheckpointError, TrainConfig, TrainingDiverged, evaluate, fit, load_checkpoint, param_digest,
                    save_checkpoint)

log = logging.getLogger("rnp")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    subcommand: str
    checkpoint: str | None = None
    images: str | None = None
    labels: str | None = None
    synth: int = 256
    synth_seed: int = 0
    overrides: dict = field(default_factory=dict)
    out: str = "."
    seed: int = 0

    REQUIRES_CHECKPOINT = ("parse", "sample", "interpolate", "export-latents")

    def validate(self) -> None:
        if self.subcommand in self.REQUIRES_CHECKPOINT and not self.checkpoint:
            raise UsageError(f"{self.subcommand} needs --checkpoint")
        if (self.images is None) != (self.labels is None):
            raise UsageError("--images and --labels go together")
        if self.synth < 1:
            raise UsageError("--synth must be >= 1")


# --- argument parsing ------------------------------------------------------

def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--images", help="IDX image file (default: synthetic strokes)")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--synth", type=int, default=256, help="synthetic corpus size")
    p.add_argument("--synth-seed", type=int, default=0)


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--z-dim", type=int)
    p.add_argument("--tau2", type=int)
    p.add_argument("--tau1", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--patch-size", type=int)


def _train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=4e-5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--clip-norm", type=float, default=10.0)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="rnp", description=__doc__.splitlines()[0])
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fit a model, write model.rnp and metrics.csv")
    _data_args(p)
    _model_args(p)
    _train_args(p)
    p.add_argument("--checkpoint", help="resume from this checkpoint instead of a fresh init")
    p.add_argument("--encoder-only", action="store_true")

    p = sub.add_parser("parse", help="per-image canvas, overlays, sub-part tiles and parse.json")
    _data_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--index", type=int, nargs="+", help="dataset indices (default: the first --limit)")
    p.add_argument("--limit", type=int, default=4)

    p = sub.add_parser("sample", help="decode z2 ~ N(0, I)")
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int, default=16)

    p = sub.add_parser("interpolate", help="decode along (1 - a) zA + a zB")
    _data_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--from", dest="src", required=True, help="image index, or class:<label> for a class mean")
    p.add_argument("--to", dest="dst", required=True)
    p.add_argument("--steps", type=int, default=8)

    p = sub.add_parser("transfer", help="train without one class, then fine-tune only the encoder on it")
    _data_args(p)
    _model_args(p)
    _train_args(p)
    p.add_argument("--holdout", type=int, required=True)
    p.add_argument("--finetune-steps", type=int)
    p.add_argument("--checkpoint", help="skip base training and start from this checkpoint")

    p = sub.add_parser("export-latents", help="CSV of posterior-mean z2 and every z1 trace vector")
    _data_args(p)
    p.add_argument("--checkpoint")

    p = sub.add_parser("gradcheck", help="float64 finite-difference suite")

    for p in sub.choices.values():
        p.add_argument("--out", default=".")
        p.add_argument("--seed", type=int, default=0)
    return root


def _run_config(args) -> RunConfig:
    keys = ("z_dim", "tau2", "tau1", "beta", "image_size", "patch_size")
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    rc = RunConfig(args.subcommand, getattr(args, "checkpoint", None), getattr(args, "images", None),
                   getattr(args, "labels", None), getattr(args, "synth", 256), getattr(args, "synth_seed", 0),
                   overrides, args.out, args.seed)
    rc.validate()
    return rc


# --- helpers --------------------------------------------------------------

def _dataset(rc: RunConfig, cfg: ModelConfig) -> tuple[Dataset, list | None]:
    if rc.images:
        ds = load_idx(rc.images, rc.labels)
        if ds.images.shape[1:] != (cfg.image_size, cfg.image_size):
            raise UsageError(f"images are {ds.images.shape[1:]}, model expects {cfg.image_size}")
        return ds, None
    return synth_strokes(SynthSpec(count=rc.synth, seed=rc.synth_seed, image_size=cfg.image_size,
                                   patch_size=cfg.patch_size))


def _out(rc: RunConfig) -> Path:
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(rc: RunConfig) -> RNP:
    model, _ = load_checkpoint(rc.checkpoint)
    return model


def _fresh(rc: RunConfig) -> RNP:
    try:
        cfg = ModelConfig(seed=rc.seed, **rc.overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return RNP.init(cfg)


def _train_config(args, rc: RunConfig, **kw) -> TrainConfig:
    base = dict(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, max_steps=args.max_steps,
                clip_norm=args.clip_norm, seed=rc.seed)
    base.update(kw)
    return TrainConfig(**base)


def _decode(model: RNP, z: np.ndarray) -> np.ndarray:
    with no_tape():
        return generate(model.hyper, Tensor(z.astype(np.float32)), model.cfg).level2.canvas.data


def _posterior_means(model: RNP, images: np.ndarray, batch: int = 64) -> np.ndarray:
    with no_tape():
        return np.concatenate([encode(model.encoder, Tensor(images[i:i + batch]))[0].data
                               for i in range(0, len(images), batch)])


# --- subcommands ------------------------------------------------------------

def cmd_train(args, rc: RunConfig) -> int:
    model = _load(rc) if rc.checkpoint else _fresh(rc)
    ds, _ = _dataset(rc, model.cfg)
    out = _out(rc)
    tc = _train_config(args, rc, trainable="encoder" if args.encoder_only else "all",
                       metrics_path=str(out / "metrics.csv"), checkpoint_path=str(out / "model.rnp"))
    _, hist = fit(model, ds, tc)
    last = hist[-1].total if hist else float("nan")
    print(f"trained {len(hist)} steps, final batch loss {last:.4f} -> {out / 'model.rnp'}")
    return EXIT_OK


def parse_image(model: RNP, image: np.ndarray, out: Path) -> dict:
    """Write every artifact for one image and return its manifest entry."""
    cfg = model.cfg
    with no_tape():
        tree = infer(model, Tensor(image[None].astype(np.float32)))
    top = tree.level2
    placed = np.stack([p.data[0] for p in top.placed])
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "input.png", image)
    save_png(out / "canvas.png", top.canvas.data[0])
    save_png(out / "overlay.png", overlay(placed))
    parts = []
    tiles = np.zeros((cfg.tau2, cfg.tau1, cfg.patch_size, cfg.patch_size))
    for t, sub in enumerate(tree.level1):
        name, _ = part_color(t)
        part_file = f"part{t}_{name}.png"
        save_png(out / part_file, part_overlay(placed, t))
        subparts = []
        for s, placed_sub in enumerate(sub.placed):
            tiles[t, s] = placed_sub.data[0]
            tile_file = f"sub{t}_{s}.png"
            save_png(out / tile_file, tiles[t, s])
            subparts.append({"index": s, "file": tile_file, "action": sub.actions[s].params()[0].tolist()})
        parts.append({"index": t, "color": name, "file": part_file,
                      "action": top.actions[t].params()[0].tolist(), "subparts": subparts})
    save_png(out / "tiles.png", tile_grid(tiles))
    return {"canvas": "canvas.png", "overlay": "overlay.png", "tiles": "tiles.png", "parts": parts}


def cmd_parse(args, rc: RunConfig) -> int:
    model = _load(rc)
    ds, _ = _dataset(rc, model.cfg)
    idx = args.index if args.index else list(range(min(args.limit, len(ds))))
    bad = [i for i in idx if not 0 <= i < len(ds)]
    if bad:
        raise UsageError(f"indices out of range: {bad}")
    out = _out(rc)
    manifest = {"order": "depth-first", "tau2": model.cfg.tau2, "tau1": model.cfg.tau1, "images": []}
    for i in idx:
        entry = parse_image(model, ds.images[i], out / f"img{i:05d}")
        manifest["images"].append({"index": i, "label": int(ds.labels[i]), "dir": f"img{i:05d}", **entry})
    (out / "parse.json").write_text(json.dumps(manifest, indent=1))
    print(f"parsed {len(idx)} images -> {out}")
    return EXIT_OK


def cmd_sample(args, rc: RunConfig) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    model = _load(rc)
    z = np.random.default_rng(rc.seed).standard_normal((args.n, model.cfg.z_dim))
    canv = _decode(model, z)
    if not np.all(np.isfinite(canv)):
        raise FloatingPointError("non-finite sample")
    out = _out(rc)
    for k, c in enumerate(canv):
        save_png(out / f"sample_{k:03d}.png", c)
    print(f"wrote {args.n} samples -> {out}")
    return EXIT_OK


def _endpoint(spec: str, model: RNP, ds: Dataset) -> np.ndarray:
    if spec.startswith("class:"):
        try:
            c = int(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad class spec {spec!r}") from None
        members = ds.images[ds.labels == c]
        if not len(members):
            raise UsageError(f"no images with label {c}")
        return _posterior_means(model, members).mean(0)
    try:
        i = int(spec)
    except ValueError:
        raise UsageError(f"endpoint must be an index or class:<label>, got {spec!r}") from None
    if not 0 <= i < len(ds):
        raise UsageError(f"index {i} out of range")
    return _posterior_means(model, ds.images[i:i + 1])[0]


def cmd_interpolate(args, rc: RunConfig) -> int:
    if args.steps < 2:
        raise UsageError("--steps must be >= 2")
    model = _load(rc)
    ds, _ = _dataset(rc, model.cfg)
    za, zb = _endpoint(args.src, model, ds), _endpoint(args.dst, model, ds)
    alpha = np.linspace(0.0, 1.0, args.steps)[:, None]
    canv = _decode(model, (1 - alpha) * za + alpha * zb)
    out = _out(rc)
    for k, c in enumerate(canv):
        save_png(out / f"interp_{k:03d}.png", c)
    print(f"wrote {args.steps} interpolation frames -> {out}")
    return EXIT_OK


def cmd_transfer(args, rc: RunConfig) -> int:
    model = _load(rc) if rc.checkpoint else _fresh(rc)
    ds, _ = _dataset(rc, model.cfg)
    held = ds.labels == args.holdout
    if not held.any() or held.all():
        raise UsageError(f"holdout class {args.holdout} must be present and not the only class")
    base, novel = ds.where(~held, "base"), ds.where(held, f"class{args.holdout}")
    out = _out(rc)
    if not rc.checkpoint:
        fit(model, base, _train_config(args, rc, metrics_path=str(out / "base_metrics.csv")))
        save_checkpoint(model, out / "base.rnp", {"dataset": base.name, "seed": rc.seed})
    before_hash = param_digest(model.hyper_params())
    before = evaluate(model, novel.images)
    steps = args.finetune_steps if args.finetune_steps is not None else args.max_steps
    fit(model, novel, _train_config(args, rc, max_steps=steps, trainable="encoder",
                                    metrics_path=str(out / "transfer_metrics.csv")))
    after = evaluate(model, novel.images)
    after_hash = param_digest(model.hyper_params())
    save_checkpoint(model, out / "transfer.rnp", {"dataset": novel.name, "seed": rc.seed})
    report = {"holdout": args.holdout, "loss_before": before["total"], "loss_after": after["total"],
              "relative_reduction": 1 - after["total"] / before["total"],
              "hyper_digest_before": before_hash, "hyper_digest_after": after_hash}
    (out / "transfer.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(report))
    return EXIT_OK


def cmd_export(args, rc: RunConfig) -> int:
    model = _load(rc)
    cfg = model.cfg
    ds, _ = _dataset(rc, cfg)
    out = _out(rc)
    header = ["index", "label"] + [f"z2_{j}" for j in range(cfg.z_dim)]
    header += [f"z1_{t}_{j}" for t in range(cfg.tau2) for j in range(cfg.z_dim)]
    with open(out / "latents.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for lo in range(0, len(ds), 64):
            with no_tape():
                tree = infer(model, Tensor(ds.images[lo:lo + 64]))
            z1 = np.concatenate([s.data for s in tree.level2.states], axis=1)
            for k in range(len(z1)):
                i = lo + k
                row = [i, int(ds.labels[i])] + [f"{v:.9g}" for v in tree.z2.data[k]]
                w.writerow(row + [f"{v:.9g}" for v in z1[k]])
    print(f"exported {len(ds)} rows -> {out / 'latents.csv'}")
    return EXIT_OK


def cmd_gradcheck(args, rc: RunConfig) -> int:
    results, seconds = run_all(rc.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:40s} {r.error:.3e} < {r.tol:g}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {seconds:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {"train": cmd_train, "parse": cmd_parse, "sample": cmd_sample, "interpolate": cmd_interpolate,
            "transfer": cmd_transfer, "export-latents": cmd_export, "gradcheck": cmd_gradcheck}


def _thread_limit():
    n = os.environ.get("RNP_THREADS")
    if not n:
        return contextlib.nullcontext()
    if not n.isdigit() or int(n) < 1:
        raise UsageError(f"RNP_THREADS must be a positive integer, got {n!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        rc = _run_config(args)
    except UsageError as exc:
        print(f"rnp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return COMMANDS[rc.subcommand](args, rc)
    except UsageError as exc:
        print(f"rnp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, IdxError, CheckpointError) as exc:
        print(f"rnp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, TrainingDiverged) as exc:
        print(f"rnp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
