"""Command line entry point: ``waterflow <command> [options]``.

Exit codes
    0  success
    1  unexpected internal error
    2  bad usage or input (unknown config key, malformed file, missing prerequisite)
    3  a numeric tolerance was exceeded (invert-check)
    4  the gradient suite failed (grad-check)
    5  non-finite values aborted a run (train)
    6  a checkpoint failed validation (CRC, magic, names or shapes)
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import ndgrad as G
from .config import ConfigError, RunConfig
from .data import (CheckpointError, DataError, load_dataset, ppm_read, ppm_write, read_manifest,
                   write_dataset)
from .detect import decode_and_nms, draw_boxes, write_boxes_csv
from .evaluate import evaluate
from .flow import FlowError
from .metrics import channel_stats, emit_csv
from .model import WaterFlow
from .physics import PhysicsError
from .train import PHASES, TrainingAborted, build_trainer, load_models

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_TOLERANCE = 3
EXIT_GRADCHECK = 4
EXIT_NONFINITE = 5
EXIT_CHECKPOINT = 6

INVERT_TOL = {"float32": 1e-3, "float64": 1e-8}

logger = logging.getLogger("waterflow")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# --- image IO: PPM for viewing, .npy for exact float round trips ----------------------------------

def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path)
        if img.ndim != 3 or img.shape[0] != 3:
            raise DataError(f"{path}: expected a 3 x H x W array, got {img.shape}")
        return img.astype(np.float64)
    return ppm_read(path)


def write_image(img: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npy":
        np.save(path, np.asarray(img, dtype=np.float64))
    else:
        ppm_write(np.clip(img, 0.0, 1.0), path)


def stats_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + "_stats.csv")


# --- commands --------------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} exists and is not empty (use --force to overwrite)")
    if args.manifest:
        entries = read_manifest(args.manifest)
    else:
        if args.count is None:
            raise CliError("gen-data needs --count or --manifest")
        base = cfg.train_seed_base if args.split == "train" else cfg.val_seed_base
        entries = [(base + args.start + i, args.split) for i in range(args.count)]
    write_dataset(out, entries, cfg.image_size, cfg.image_size)
    print(f"wrote {len(entries)} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    for kv in args.set or []:
        key, _, val = kv.partition("=")
        cfg.set(key.strip(), val)
    cfg.validate()
    data = load_dataset(args.data)
    tr = build_trainer(cfg, data, args.phase, args.out, resume=args.resume, from_scratch=args.from_scratch)
    try:
        ckpt = tr.run()
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    (Path(args.out) / "config.txt").write_text(cfg.to_text())
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def _enhancer(ckpt, config=None) -> WaterFlow:
    model, _, _ = load_models(ckpt, RunConfig.load(config))
    if model is None:
        raise CliError(f"{ckpt} holds no enhancer parameters")
    return model


def _cond_batch(args, img: np.ndarray) -> np.ndarray:
    cond = read_image(args.cond) if args.cond else img
    if cond.shape != img.shape:
        raise CliError("--cond image has a different size than --in")
    return cond[None]


def cmd_enhance(args) -> int:
    model = _enhancer(args.ckpt, args.config)
    img = read_image(args.inp)
    cond = _cond_batch(args, img)
    with G.no_grad():
        out, _ = model.flow.forward(G.Tensor(img[None].astype(model.cfg.dtype)), model.context(cond))
    enhanced = out.data[0].astype(np.float64)
    write_image(enhanced, args.out)
    emit_csv(channel_stats(np.clip(enhanced, 0.0, 1.0)), stats_path(args.out))
    print(f"wrote {args.out} and {stats_path(args.out)}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    model = _enhancer(args.ckpt, args.config)
    img = read_image(args.inp)
    cond = _cond_batch(args, img)
    with G.no_grad():
        out, _ = model.flow.inverse(G.Tensor(img[None].astype(model.cfg.dtype)), model.context(cond))
    write_image(out.data[0].astype(np.float64), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def invert_error(model: WaterFlow, trials: int, size: int, seed: int) -> float:
    """Worst max-abs round-trip error of the flow on random images."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with G.no_grad():
        for _ in range(trials):
            x = rng.uniform(size=(1, 3, size, size))
            ctx = model.context(x)
            y, _ = model.flow.forward(G.Tensor(x.astype(model.cfg.dtype)), ctx)
            back, _ = model.flow.inverse(y, ctx)
            worst = max(worst, float(np.max(np.abs(back.data.astype(np.float64) - x.astype(model.cfg.dtype)))))
    return worst


def cmd_invert_check(args) -> int:
    base = RunConfig.load(args.config)
    if args.precision:
        base.precision = args.precision
    if args.ckpt:
        model, _, _ = load_models(args.ckpt, base)
        if model is None:
            raise CliError(f"{args.ckpt} holds no enhancer parameters")
    else:
        model = WaterFlow(base)
    prec = model.cfg.precision
    tol = args.tol if args.tol is not None else INVERT_TOL[prec]
    err = invert_error(model, args.trials, args.size or model.cfg.image_size, args.seed)
    ok = err < tol
    print(f"invert-check {prec}: max round-trip error {err:.3e} over {args.trials} trials "
          f"(tolerance {tol:.0e}) {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_grad_check(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(trials=args.trials, seed=args.seed, tol=args.tol, names=args.case or None)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} worst {r.worst:.2e} ({r.seconds:.1f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases passed")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    model, det, _ = load_models(args.ckpt, cfg)
    data = load_dataset(args.data)
    res = evaluate(model, det, data, args.out, dtype=cfg.dtype)
    for k, v in res.summary.items():
        print(f"{k} = {v}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = RunConfig.load(args.config)
    model, det, _ = load_models(args.ckpt, cfg, need_detector=True)
    img = read_image(args.inp)
    x = img[None]
    with G.no_grad():
        if model is not None:
            y, _ = model.enhance(x)
            x = np.clip(y.data.astype(np.float64), 0.0, 1.0)
        head = det(G.Tensor(x.astype(cfg.dtype)))
    boxes = decode_and_nms(head.data, score_thresh=args.score)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = Path(args.inp).stem
    write_boxes_csv(out / f"{name}_boxes.csv", [(name, b) for b in boxes], with_score=True)
    ppm_write(draw_boxes(np.clip(x[0], 0.0, 1.0), boxes), out / f"{name}_boxes.ppm")
    print(f"{len(boxes)} boxes written to {out}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="waterflow", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render synthetic scene pairs")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.add_argument("--start", type=int, default=0, help="offset into the split's seed range")
    p.add_argument("--manifest", help="regenerate exactly the scenes listed in a manifest")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training phase")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--phase", choices=PHASES, required=True)
    p.add_argument("--resume")
    p.add_argument("--out", required=True)
    p.add_argument("--from-scratch", action="store_true", help="skip pretrained-checkpoint prerequisites")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(fn=cmd_train)

    for name, fn, what in (("enhance", cmd_enhance, "underwater image to enhanced image"),
                           ("degrade", cmd_degrade, "enhanced image back to underwater image")):
        p = sub.add_parser(name, help=what)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--in", dest="inp", required=True, help=".ppm or .npy (float, exact)")
        p.add_argument("--out", required=True)
        p.add_argument("--cond", help="underwater image supplying the condition (default: --in)")
        p.add_argument("--config")
        p.set_defaults(fn=fn)

    p = sub.add_parser("invert-check", help="flow round-trip error on random inputs")
    p.add_argument("--ckpt", help="omit to check a freshly initialised model")
    p.add_argument("--config")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--size", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_invert_check)

    p = sub.add_parser("grad-check", help="finite-difference check of every op and loss")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--case", action="append", help="run only this case (repeatable)")
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("eval", help="quality, AP and diagnostics on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("detect", help="boxes for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--score", type=float, default=0.3, help="score threshold")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_detect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (KeyError, ValueError) as exc:
        # unknown or misshapen checkpoint entries surface as KeyError / ValueError from loading
        if isinstance(exc, (ConfigError, DataError, PhysicsError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if getattr(args, "ckpt", None) or getattr(args, "resume", None):
            print(f"checkpoint error: {exc}", file=sys.stderr)
            return EXIT_CHECKPOINT
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (G.NonFiniteError, FlowError) as exc:
        print(f"non-finite values: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
