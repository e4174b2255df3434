"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure, 4 gradient check above tolerance.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import gaussfilter
from .frontend import ToyFrontEnd
from .fusion import FusionConfig, FusionError, fuse
from .grid import GrdError, UnsupportedFormatError, read_grid, read_ppm, resample_bilinear, write_grid
from .gradcheck import TOLERANCE, run_gradcheck
from .metrics import MetricsDomainError, compute_metrics
from .modelfile import ModelFormatError, load_model, save_model
from .synth import load_dataset, save_dataset, synthesize_dataset
from .train import SgdConfig, TrainingFailure, train_finetune, train_pretrain

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 1, 2, 3, 4

PRETRAIN_LR = 1e-5
FINETUNE_LR = 4e-6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sizes(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_synth(args) -> int:
    samples = synthesize_dataset(args.seed, args.count, args.w, args.h, args.scales)
    save_dataset(samples, args.out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    samples = load_dataset(args.data)
    scales = len(samples[0].sides)
    depth_offset = float(np.mean([s.depth.mean() for s in samples]))
    frontend = ToyFrontEnd(scales, seed=args.seed, depth_offset=depth_offset)
    sgd = SgdConfig(args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed)
    frontend, _ = train_pretrain(samples, frontend, sgd, log_path=args.log)
    save_model(args.out, frontend=frontend)
    return EXIT_OK


def cmd_finetune(args) -> int:
    samples = load_dataset(args.data)
    _, frontend = load_model(args.model)
    if frontend is None:
        raise ModelFormatError(f"{args.model} holds no front-end parameters")
    config = FusionConfig(mode=args.mode, scales=frontend.scales, iterations=args.iters, order=args.order)
    sgd = SgdConfig(args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed)
    frontend, config, _ = train_finetune(samples, frontend, config, sgd, log_path=args.log)
    save_model(args.out, config=config, frontend=frontend)
    return EXIT_OK


def cmd_infer(args) -> int:
    config, _ = load_model(args.model)
    if config is None:
        raise ModelFormatError(f"{args.model} holds no fusion configuration")
    image = read_ppm(args.image)
    height, width = image.shape[:2]
    raw = [read_grid(p) for p in args.sides]
    if any(s.ndim != 2 for s in raw):
        raise GrdError("side outputs must be rank-2 grids")
    sides = [s if s.shape == (height, width) else resample_bilinear(s, width, height) for s in raw]
    prediction = fuse(sides, image, config).prediction
    if not np.all(np.isfinite(prediction)):
        raise FloatingPointError("non-finite prediction")
    write_grid(prediction.astype(raw[0].dtype), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = read_grid(args.pred)
    gt = read_grid(args.gt)
    mask = read_grid(args.mask) if args.mask else None
    report = compute_metrics(pred, gt, mask, denominator=args.ratio_denominator)
    print(report.csv_line())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed, args.size, args.scales, args.mode)
    for group, err in report.errors.items():
        print(f"{group},{report.counts[group]},{err!r}")
    print(f"max_relative_error,{report.max_error!r}")
    return EXIT_OK if report.max_error <= TOLERANCE else EXIT_THRESHOLD


def cmd_bench_filter(args) -> int:
    print("N,dense_ms,lattice_build_ms,lattice_filter_ms,rel_l2_err")
    for n, dense_ms, build_ms, filter_ms, err in gaussfilter.bench_filter(args.sizes, args.kind, args.seed):
        print(f"{n},{dense_ms:.3f},{build_ms:.3f},{filter_ms:.3f},{err:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crffusion", description="Continuous-CRF fusion of multi-scale score maps.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--w", type=int, default=32)
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--scales", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="fit the toy front-end with side losses")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=PRETRAIN_LR)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="CSV training log")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train front-end and kernel weights through the fusion")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("cascade", "multiscale"), required=True)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--order", choices=("inner", "outer"), default="inner")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=FINETUNE_LR)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="CSV training log")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="fuse side outputs into one prediction")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--sides", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="depth metrics as one CSV line rel,log10,rms,d1,d2,d3")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", help="GRD validity mask (nonzero = valid)")
    p.add_argument("--ratio-denominator", choices=("pred", "gt"), default="pred")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all training gradients")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=24)
    p.add_argument("--scales", type=int, default=3)
    p.add_argument("--mode", choices=("cascade", "multiscale"), default="multiscale")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-filter", help="dense vs lattice Gaussian filtering benchmark")
    p.add_argument("--sizes", type=_sizes, default=[256, 1024, 4096, 16384])
    p.add_argument("--kind", choices=("spatial", "bilateral"), default="bilateral")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_filter)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # divergence is detected and reported explicitly, so skip numpy's warnings
        with np.errstate(all="ignore"):
            return args.func(args)
    except (TrainingFailure, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GrdError, UnsupportedFormatError, ModelFormatError, MetricsDomainError, FusionError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
