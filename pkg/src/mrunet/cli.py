"""Command-line entry point: ``mrunet <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 I/O or format error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import datapipe as dp
from .errors import MrunetError
from .gradcheck import grad_check
from .harness import (
    DESK,
    TrainConfig,
    compare,
    emit_curves,
    evaluate_checkpoint,
    predict,
    read_run_log,
    train,
)
from .metrics import write_metrics_csv
from .netbuilder import ArchitectureSpec, build_model
from .optim import soft_dice_loss
from .tensor import Tensor

log = logging.getLogger("mrunet")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--arch", choices=["unet", "mrunet"])
    p.add_argument("--base-channels", type=int)
    p.add_argument("--epochs", type=int, help="maximum number of epochs")
    p.add_argument("--batch", type=int, help="batch size")
    p.add_argument("--threshold", type=float, help="binarization threshold (default 0.5)")
    p.add_argument("--desk", action="store_true", help="desk-scale defaults: base 8, size 64, 300 epochs, batch 4")
    p.add_argument("--data", help="dataset directory with images/ and masks/")
    p.add_argument("--size", type=int, help="resize images to SIZE x SIZE")
    p.add_argument("--no-augment", action="store_true", help="disable 8-way dihedral augmentation")
    p.add_argument("--augment", action="store_true", help="enable 8-way dihedral augmentation")
    p.add_argument("--patience", type=int, help="stop after N epochs without validation improvement")
    p.add_argument("--tau", type=float, help="validation sDSC level for epochs-to-threshold (default 0.8)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_config(args, arch: Optional[str] = None) -> TrainConfig:
    """Merge defaults, --desk, --config JSON, then explicit flags (last wins)."""
    d = {}
    if args.desk:
        d = TrainConfig.desk(out="runs/desk").to_dict()
    if args.config:
        d.update(json.loads(Path(args.config).read_text()))
    flags = {
        "seed": args.seed,
        "out": args.out,
        "arch": arch or args.arch,
        "base_channels": args.base_channels,
        "max_epochs": args.epochs,
        "batch_size": args.batch,
        "threshold": args.threshold,
        "data": args.data,
        "size": args.size,
        "patience": args.patience,
        "tau": args.tau,
    }
    d.update({k: v for k, v in flags.items() if v is not None})
    if args.data is not None:
        d.pop("synthetic", None)
        d.pop("split", None)
        if args.desk and args.size is None:
            d["size"] = DESK["size"]
    if args.no_augment:
        d["augment"] = False
    if args.augment:
        d["augment"] = True
    if "data" not in d and "synthetic" not in d:
        d["synthetic"] = {"count": 24, "size": DESK["size"], "multi_scale": True}
    return TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    config = build_config(args)
    result = train(config)
    print(f"best epoch {result.best_epoch}  validation sDSC {result.best_val_sdsc:.4f}  -> {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.checkpoint, split=args.split, data=args.data, threshold=args.threshold)
    run_dir = Path(args.checkpoint) if Path(args.checkpoint).is_dir() else Path(args.checkpoint).parent
    out = Path(args.csv) if args.csv else run_dir / f"{args.split}_metrics.csv"
    write_metrics_csv(report, out)
    print(report.summary())
    print(f"per-image metrics -> {out}")
    return 0


def cmd_predict(args) -> int:
    predict(args.checkpoint, args.image, args.output, prob_path=args.prob, resize=args.resize, threshold=args.threshold)
    print(f"mask -> {args.output}")
    return 0


def cmd_compare(args) -> int:
    cu = build_config(args, arch="unet")
    cm = build_config(args, arch="mrunet")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    ckpts = (args.unet_checkpoint, args.mrunet_checkpoint) if args.unet_checkpoint else None
    out = args.out or "runs/compare"
    compare(cu, cm, seeds=seeds, checkpoints=ckpts, out=out)
    print((Path(out) / "compare.txt").read_text(), end="")
    return 0


def cmd_synth(args) -> int:
    samples = dp.gen_synthetic(args.count, args.size, args.seed if args.seed is not None else 0,
                               multi_scale=not args.single_scale)
    root = dp.write_dataset(samples, args.out)
    print(f"{len(samples)} samples -> {root}")
    return 0


def cmd_gradcheck(args) -> int:
    seeds = range(args.seeds)
    worst = 0.0
    start = time.perf_counter()
    for seed in seeds:
        spec = ArchitectureSpec(args.arch, args.base_channels, 1)
        model = build_model(spec, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed)
        # random biases keep the check point away from ReLU kinks at exactly 0
        for name, p in model.parameters.items():
            if name.endswith(".bias"):
                p.data[:] = rng.normal(0.0, 0.1, p.shape)
        x = Tensor(rng.random((2, 1, args.size, args.size)))
        y = (rng.random((2, 1, args.size, args.size)) > 0.5).astype(np.float64)
        params = list(model.parameters.values())
        err = grad_check(lambda *_: soft_dice_loss(model(x), y).loss, [x, *params],
                         step=args.step, samples=args.samples, seed=seed)
        worst = max(worst, err)
        print(f"seed {seed:3d}  max relative error {err:.3e}")
    status = "PASS" if worst <= args.tol else "FAIL"
    print(f"{status}: worst {worst:.3e} (tolerance {args.tol:g}) in {time.perf_counter() - start:.1f}s")
    return 0 if worst <= args.tol else 1


def cmd_curves(args) -> int:
    logs = {}
    for item in args.logs:
        label, _, path = item.rpartition("=")
        path = Path(path)
        if path.is_dir():
            path = path / "runlog.csv"
        logs[label or path.parent.name] = read_run_log(path)
    out = emit_curves(logs, args.out)
    print(f"curves -> {out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrunet", description="U-Net / mrU-Net segmentation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model, keeping the best validation checkpoint")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (DSC, sensitivity, specificity)")
    p.add_argument("checkpoint", help="run directory or .mrun file")
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--data", help="evaluate every image in this dataset directory instead")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--csv", help="where to write per-image metrics")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("checkpoint", help="run directory or .mrun file")
    p.add_argument("image")
    p.add_argument("output", help="binary mask PNG")
    p.add_argument("--prob", help="also write the foreground probability map PNG")
    p.add_argument("--resize", type=int, help="resize the image to N x N first")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare", help="train U-Net and mrU-Net on the same splits and compare")
    _common(p)
    p.add_argument("--seeds", help="comma-separated seeds, one model pair per seed")
    p.add_argument("--unet-checkpoint", help="skip training: use this U-Net run")
    p.add_argument("--mrunet-checkpoint", help="skip training: use this mrU-Net run")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.add_argument("--single-scale", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full network loss")
    p.add_argument("--arch", choices=["unet", "mrunet"], default="mrunet")
    p.add_argument("--base-channels", type=int, default=2)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--samples", type=int, default=8, help="elements checked per tensor")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("curves", help="validation sDSC curves (CSV + SVG) from run logs")
    p.add_argument("logs", nargs="+", help="[label=]run directory or runlog.csv")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except MrunetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, OSError) else 1


if __name__ == "__main__":
    sys.exit(main())
