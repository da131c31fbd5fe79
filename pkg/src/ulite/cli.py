"""Command-line interface.

Subcommands: train, eval, predict, params, ablate, footprint, synth.
Exit codes: 0 success, 1 usage error (bad flags), 2 runtime failure
(missing files, corrupt checkpoints, config mismatches, aborted training).
"""

import argparse
import csv
import os
import sys

from . import tensor as T
from .checkpoint import load_checkpoint
from .data import (load_dataset, load_image, make_splits, save_dataset,
                   save_mask_png, synth_dataset)
from .errors import ULiteError
from .metrics import binarize, evaluate
from .model import (ModelConfig, ULiteModel, count_params, gradient_footprint,
                    list_variants, parse_config_file, render_footprint)
from .ops import depthwise_conv
from .tensor import add as tensor_add
from .train import AugmentConfig, TrainConfig, train_loop


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; this package reserves 2
    # for runtime failures, so remap usage problems to exit code 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=0,
                     help="run seed for data generation, shuffling, augmentation")
    sub.add_argument("--config", type=str, default=None,
                     help="model config file (key = value lines)")
    sub.add_argument("--threads", type=int, default=None,
                     help="worker threads for depthwise conv (default: ULITE_THREADS or 1)")


def _model_config(args) -> ModelConfig:
    if args.config:
        return parse_config_file(args.config)
    return ModelConfig()


def _dataset(args, default_split: str):
    split = getattr(args, "split", default_split)
    if getattr(args, "synthetic", None):
        return synth_dataset(args.synthetic, args.seed, size=args.size)
    return load_dataset(args.data_dir, split=split, size=args.size)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ulite",
                     description="lightweight axial depthwise segmentation network")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = commands.add_parser("train", help="train a model")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data-dir", type=str, help="dataset directory")
    src.add_argument("--synthetic", type=int, metavar="N",
                     help="train on N generated synthetic pairs")
    p.add_argument("--split", type=str, default="train",
                   help="manifest split to train on (default train)")
    p.add_argument("--size", type=int, default=256, help="square input size")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--val-split", type=float, default=0.1,
                   help="trailing fraction held out for validation")
    p.add_argument("--no-augment", action="store_true",
                   help="disable rotation/flip augmentation")
    p.add_argument("--stop-at-dice", type=float, default=None,
                   help="stop once training Dice reaches this value")
    p.add_argument("--out", type=str, default="runs/train",
                   help="output directory for log.csv and checkpoints")
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="score a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data-dir", type=str, required=True)
    p.add_argument("--split", type=str, default="all")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--global", dest="global_metrics", action="store_true",
                   help="also report metrics pooled over all pixels")
    p.add_argument("--out", type=str, default=None, help="write per-sample report CSV here")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("predict", help="write predicted masks as PNGs")
    _add_common(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data-dir", type=str, required=True,
                   help="directory with an images/ folder")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", type=str, required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = commands.add_parser("params", help="per-layer parameter audit")
    _add_common(p)
    p.set_defaults(func=cmd_params)

    p = commands.add_parser("ablate",
                            help="train/score every architecture variant")
    _add_common(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data-dir", type=str)
    src.add_argument("--synthetic", type=int, metavar="N", default=8)
    p.add_argument("--split", type=str, default="train")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", type=str, default=None, help="write the grid CSV here")
    p.set_defaults(func=cmd_ablate)

    p = commands.add_parser("footprint",
                            help="render influence footprints of the building blocks")
    _add_common(p)
    p.add_argument("--size", type=int, default=17, help="odd probe size")
    p.set_defaults(func=cmd_footprint)

    p = commands.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--val-ratio", type=float, default=0.0)
    p.add_argument("--test-ratio", type=float, default=0.0)
    p.add_argument("--out", type=str, required=True, help="dataset directory to create")
    p.set_defaults(func=cmd_synth)

    return parser


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = _model_config(args)
    pairs = _dataset(args, default_split="train")
    model = ULiteModel.build(config)
    os.makedirs(args.out, exist_ok=True)
    train_cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        val_split=args.val_split,
        augment=None if args.no_augment else AugmentConfig(),
        stop_at_dice=args.stop_at_dice,
        log_path=os.path.join(args.out, "log.csv"),
        checkpoint_path=os.path.join(args.out, "final.ckpt"),
    )
    result = train_loop(model, pairs, train_cfg)
    for row in result.epochs:
        extra = f" val_dice={row.val_dice:.4f}" if row.val_dice is not None else ""
        print(f"epoch {row.epoch}: loss={row.loss:.4f} dice={row.dice:.4f} "
              f"iou={row.iou:.4f}{extra}")
    if result.stopped_early:
        print(f"stopped early at epoch {result.epochs[-1].epoch} "
              f"(dice {result.final_train_dice:.4f})")
    print(f"final checkpoint: {result.checkpoint_path}")
    if result.best_checkpoint_path:
        print(f"best-validation checkpoint: {result.best_checkpoint_path} "
              f"(dice {result.best_val_dice:.4f} at epoch {result.best_epoch})")
    return 0


def _check_config_match(model, args) -> None:
    if not args.config:
        return
    wanted = parse_config_file(args.config)
    have = model.config
    for field_name in ("widths", "n", "dw_variant", "addc", "bottleneck_width"):
        a, b = getattr(have, field_name), getattr(wanted, field_name)
        if a != b:
            raise ULiteError(f"checkpoint config mismatch: {field_name} is {a} "
                             f"in the checkpoint but {b} in {args.config}")


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    _check_config_match(model, args)
    pairs = load_dataset(args.data_dir, split=args.split, size=args.size)
    report = evaluate(model, pairs, threshold=args.threshold)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "dice", "iou"])
            for sample_id, dice, iou in report.rows():
                writer.writerow([sample_id, f"{dice:.6f}", f"{iou:.6f}"])
        print(f"report: {args.out}")
    print(f"mean_dice={report.mean_dice:.6f} mean_iou={report.mean_iou:.6f} "
          f"({len(report.scores)} samples)")
    if args.global_metrics:
        print(f"global_dice={report.pooled_dice:.6f} global_iou={report.pooled_iou:.6f}")
    return 0


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    _check_config_match(model, args)
    model.set_mode("eval")
    images_dir = os.path.join(args.data_dir, "images")
    if not os.path.isdir(images_dir):
        images_dir = args.data_dir
    names = sorted(n for n in os.listdir(images_dir) if n.lower().endswith(".png"))
    if not names:
        raise ULiteError(f"no PNG images under {images_dir}")
    os.makedirs(args.out, exist_ok=True)
    for name in names:
        stem, image = load_image(os.path.join(images_dir, name), size=args.size)
        pred = binarize(model.forward(image), threshold=args.threshold)
        save_mask_png(pred.data[0, 0], os.path.join(args.out, stem + ".png"))
    print(f"wrote {len(names)} masks to {args.out}")
    return 0


def cmd_params(args) -> int:
    report = count_params(_model_config(args))
    print(report.format_table())
    return 0


def cmd_ablate(args) -> int:
    if args.data_dir:
        pairs = load_dataset(args.data_dir, split=args.split, size=args.size)
    else:
        pairs = synth_dataset(args.synthetic, args.seed, size=args.size)
    rows = []
    for config in list_variants():
        model = ULiteModel.build(config)
        total = count_params(model).total
        train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch,
                                lr=args.lr, seed=args.seed, val_split=0.0,
                                augment=None)
        train_loop(model, pairs, train_cfg)
        report = evaluate(model, pairs)
        rows.append((config.dw_variant, config.n,
                     "true" if config.addc else "false",
                     total, report.mean_dice, report.mean_iou))
        print(f"{config.dw_variant:<6} n={config.n} addc={rows[-1][2]:<5} "
              f"params={total:<7} dice={report.mean_dice:.4f} iou={report.mean_iou:.4f}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["operator", "n", "addc", "params", "dice", "iou"])
            for operator, n, addc, total, dice, iou in rows:
                writer.writerow([operator, n, addc, total, f"{dice:.6f}", f"{iou:.6f}"])
        print(f"grid: {args.out}")
    return 0


def cmd_footprint(args) -> int:
    from .model import Bottleneck, make_stage
    from .rng import Rng

    if args.size % 2 == 0 or args.size < 3:
        raise ULiteError(f"--size must be odd and >= 3, got {args.size}")
    config = _model_config(args)
    channels = 4

    stage = make_stage(channels, channels, config, Rng(0))
    stage.set_mode("eval")
    mask = gradient_footprint(stage.forward, channels, args.size)
    print(f"stage block ({config.dw_variant}, n={config.n}) "
          f"influence on the center output pixel:")
    print(render_footprint(mask))

    neck = Bottleneck.create(channels, channels, config.addc, config.n, Rng(1))
    neck.set_mode("eval")
    for tag, dw_h, dw_v in neck.branches:
        def branch(x, dw_h=dw_h, dw_v=dw_v):
            return tensor_add(depthwise_conv(x, dw_h), depthwise_conv(x, dw_v))
        mask = gradient_footprint(branch, channels, args.size)
        print(f"bottleneck {tag} (dilation {dw_h.dilation}):")
        print(render_footprint(mask))
    return 0


def cmd_synth(args) -> int:
    pairs = synth_dataset(args.count, args.seed, size=args.size)
    splits = None
    if args.val_ratio or args.test_ratio:
        from .data import ManifestEntry
        entries = [ManifestEntry(p.sample_id, "", "") for p in pairs]
        train_ratio = 1.0 - args.val_ratio - args.test_ratio
        labeled = make_splits(entries, (train_ratio, args.val_ratio, args.test_ratio),
                              args.seed)
        splits = [e.split for e in labeled]
    manifest = save_dataset(pairs, args.out, splits=splits)
    print(f"dataset: {args.out} ({args.count} pairs, manifest {manifest})")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        T.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ULiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
