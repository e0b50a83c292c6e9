"""``ritseg`` command line: train, eval, segment, bench, synth, make-starburst."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import CheckpointError, read_checkpoint
from .imageproc import ImageError
from .losses import ScheduleConfig
from .tensor import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3

log = logging.getLogger("ritseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_size(text: str) -> tuple[int, int]:
    """``HxW`` -> (H, W)."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 128x128, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ritseg", description="Eye-region segmentation: train, evaluate, segment, benchmark.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and keep the best validation checkpoint")
    t.add_argument("--data", required=True, help="dataset root with train/validation/test folders")
    t.add_argument("--out", required=True, help="directory for best.ritn, last.ritn and train_log.tsv")
    t.add_argument("--epochs", type=_positive_int, default=175)
    t.add_argument("--batch-size", type=_positive_int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--synthetic", type=_positive_int, metavar="N",
                   help="first write N synthetic training eyes into --data")
    t.add_argument("--size", type=parse_size, default=(128, 128), metavar="HxW", help="synthetic image size")
    sched = t.add_mutually_exclusive_group()
    sched.add_argument("--schedule-clamp", dest="clamp", action="store_true", default=True,
                       help="hold the surface-loss weight at 1 after the ramp (default)")
    sched.add_argument("--schedule-literal", dest="clamp", action="store_false",
                       help="drop back to the epoch-0 weights after the ramp")
    t.add_argument("--resume", metavar="FILE", help="continue from a checkpoint")

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=D.SPLITS, required=True)
    e.add_argument("--report", metavar="FILE", help="also write key=value metrics here")

    s = sub.add_parser("segment", help="write the label map for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--view", action="store_true", help="scale ids by 85 for viewing")

    b = sub.add_parser("bench", help="time infer-mode forwards")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--width", type=_positive_int, default=640)
    b.add_argument("--height", type=_positive_int, default=400)
    b.add_argument("--iters", type=_positive_int, default=200)
    b.add_argument("--warmup", type=_nonneg_int, default=20)
    b.add_argument("--batch", type=_positive_int, default=1)
    b.add_argument("--with-preprocess", action="store_true")

    y = sub.add_parser("synth", help="write a synthetic dataset")
    y.add_argument("--count", type=_positive_int, required=True, help="training images; val/test get count//4")
    y.add_argument("--out", required=True)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--size", type=parse_size, default=(128, 128), metavar="HxW")

    m = sub.add_parser("make-starburst", help="build the reflection overlay asset")
    m.add_argument("--source", help="image whose bright pixels form the overlay")
    m.add_argument("--threshold", type=float, help="intensity cut in [0, 1] (with --source)")
    m.add_argument("--out", required=True)
    return p


def cmd_train(args) -> int:
    from .train import TrainConfig, train

    try:
        config = TrainConfig(
            lr=args.lr,
            batch_size=args.batch_size,
            epochs=args.epochs,
            seed=args.seed,
            schedule=ScheduleConfig(clamp=args.clamp),
            checkpoint_dir=args.out,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.synthetic:
        h, w = args.size
        D.write_dataset(D.synth_generate(args.synthetic, args.seed, h, w), args.data)
    dataset = D.load_dataset(args.data)
    model, start = None, 0
    if args.resume:
        ckpt = read_checkpoint(args.resume)
        model, start = ckpt.to_model(), ckpt.epoch + 1
    best = train(config, dataset, model=model, start_epoch=start)
    print(f"best epoch {best.epoch} validation mIoU {best.best_score:.4f}; checkpoints in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    ckpt = read_checkpoint(args.checkpoint)
    samples = D.load_dataset(args.data).split(args.split)
    report = evaluate(ckpt, samples)
    print(report.to_text())
    if args.report:
        report.write(args.report)
    return EXIT_OK


def cmd_segment(args) -> int:
    from .tensor import Tensor

    model = read_checkpoint(args.checkpoint).to_model()
    img = D.preprocess(D.image_to_float(D.read_gray(args.input)))
    pred = model.predict(Tensor(img[None, None].astype(np.float32)))[0]
    D.write_gray(args.output, pred * np.uint8(85) if args.view else pred)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import benchmark

    model = read_checkpoint(args.checkpoint).to_model()
    try:
        report = benchmark(model, args.height, args.width, args.warmup, args.iters, args.batch,
                           args.with_preprocess)
    except ShapeError as exc:
        raise UsageError(str(exc)) from exc
    print(report.to_text())
    return EXIT_OK


def cmd_synth(args) -> int:
    h, w = args.size
    ds = D.synth_generate(args.count, args.seed, h, w)
    D.write_dataset(ds, args.out)
    print(f"wrote {len(ds.train)}/{len(ds.validation)}/{len(ds.test)} train/validation/test eyes to {args.out}")
    return EXIT_OK


def cmd_make_starburst(args) -> int:
    if (args.source is None) != (args.threshold is None):
        raise UsageError("--source and --threshold go together")
    if args.source is not None:
        if not 0.0 <= args.threshold <= 1.0:
            raise UsageError("--threshold must lie in [0, 1]")
        asset = D.make_starburst(D.image_to_float(D.read_gray(args.source)), args.threshold)
    else:
        asset = D.procedural_starburst(400, 640)
    D.write_gray(args.out, D.float_to_image(asset))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "segment": cmd_segment,
    "bench": cmd_bench,
    "synth": cmd_synth,
    "make-starburst": cmd_make_starburst,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    from .train import thread_limit

    try:
        with thread_limit(None):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ritseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"ritseg {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (D.DataError, ImageError, ShapeError, OSError) as exc:
        print(f"ritseg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
