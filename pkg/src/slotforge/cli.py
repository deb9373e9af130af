"""Command-line entry point: train, infer, eval, mask-preview, gen-synthetic.

Exit codes: 0 ok, 2 usage, 3 data format or contract violation, 4 numeric
failure, 5 I/O.
"""

from __future__ import annotations

import argparse
import csv
import glob
import os
import sys

import numpy as np

from . import __version__
from .config import build_train_config, load_config_file, parse_config_text
from .errors import ContractError, DataFormatError, NumericError, UsageError
from .features import (SyntheticSceneSpec, generate_scene,
                       load_features, load_ground_truth, load_label_grid,
                       save_features, save_ground_truth, save_label_grid)
from .masking import MaskingConfig, format_report, masked_map
from .metrics import evaluate, segmentation_from_labels, write_report_csv
from .model import load_model
from .pipeline import infer_features
from .trainer import train


def _cmd_gen_synthetic(args: argparse.Namespace) -> int:
    os.makedirs(args.out, exist_ok=True)
    manifest = os.path.join(args.out, "manifest.csv")
    rows = []
    for i in range(args.count):
        spec = SyntheticSceneSpec(
            grid_h=args.grid_h, grid_w=args.grid_w, n_objects=args.objects,
            d_feats=args.d_feats, background_mean=args.bg_mean,
            object_mean_range=(args.obj_lo, args.obj_hi),
            noise_std=args.noise_std, seed=args.seed + i)
        fmap, gt = generate_scene(spec)
        feat_path = os.path.join(args.out, f"scene_{i:04d}.feat")
        gt_path = os.path.join(args.out, f"scene_{i:04d}.gt")
        save_features(fmap, feat_path)
        save_ground_truth(gt, gt_path)
        rows.append((os.path.basename(feat_path), os.path.basename(gt_path)))
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["features", "ground_truth"])
        writer.writerows(rows)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def read_manifest(data_dir: str) -> list[tuple[str, str]]:
    manifest = os.path.join(data_dir, "manifest.csv")
    pairs: list[tuple[str, str]] = []
    with open(manifest, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["features", "ground_truth"]:
            raise DataFormatError(f"{manifest}: unexpected header {header}")
        for row in reader:
            if len(row) != 2:
                raise DataFormatError(f"{manifest}: bad row {row}")
            pairs.append((os.path.join(data_dir, row[0]),
                          os.path.join(data_dir, row[1])))
    return pairs


def _cmd_train(args: argparse.Namespace) -> int:
    mappings = []
    if args.config:
        mappings.append(load_config_file(args.config))
    overrides = parse_config_text("\n".join(args.set or []), source="--set")
    mappings.append(overrides)
    cfg = build_train_config(*mappings)
    pairs = read_manifest(args.data)
    if not pairs:
        raise UsageError(f"no scenes listed in {args.data}/manifest.csv")
    dataset = [load_features(f) for f, _ in pairs]
    if args.verbose:
        print(f"{len(dataset)} scenes "
              f"({dataset[0].grid_h}x{dataset[0].grid_w}x{dataset[0].d_feats}), "
              f"{cfg.heads} heads, {cfg.slots} slots x {cfg.slot_dim}")
    _, _, curve = train(dataset, cfg, out_dir=args.out)
    final = curve[-1][1] if curve else float("nan")
    print(f"trained {len(curve)} steps, final loss {final:.6f}; "
          f"outputs in {args.out}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    bank, decoder = load_model(args.checkpoint)
    feat_files = sorted(glob.glob(os.path.join(args.features, "*.feat")))
    if not feat_files:
        raise UsageError(f"no .feat files in {args.features}")
    if args.reference_head == "random":
        reference: int | str = "random"
    else:
        try:
            reference = int(args.reference_head)
        except ValueError:
            raise UsageError(
                f"--reference-head must be 'random' or an integer, "
                f"got {args.reference_head!r}")
    os.makedirs(args.out, exist_ok=True)
    for path in feat_files:
        fmap = load_features(path)
        result = infer_features(
            fmap, bank, decoder, seed=args.seed, metric=args.fusion_metric,
            matcher=args.fusion_matcher, reference=reference,
            heads=args.heads, mask_source=args.mask_source)
        stem = os.path.splitext(os.path.basename(path))[0]
        labels = result.segmentation.labels.reshape(fmap.grid_h, fmap.grid_w)
        save_label_grid(labels, os.path.join(args.out, f"{stem}.pred"))
        if args.dump_slots:
            np.savetxt(os.path.join(args.out, f"{stem}.slots"),
                       result.fused.values, fmt="%.17g")
        if args.verbose:
            print(f"{stem}: reference head {result.reference}, "
                  f"{len(result.segmentation.boxes)} nonempty slots")
    print(f"segmented {len(feat_files)} feature maps into {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    pred_files = sorted(glob.glob(os.path.join(args.pred, "*.pred")))
    if not pred_files:
        raise UsageError(f"no .pred files in {args.pred}")
    results = []
    gts = []
    for pred_path in pred_files:
        stem = os.path.splitext(os.path.basename(pred_path))[0]
        gt_path = os.path.join(args.gt, f"{stem}.gt")
        if not os.path.exists(gt_path):
            raise UsageError(f"missing ground truth {gt_path}")
        results.append(segmentation_from_labels(load_label_grid(pred_path)))
        gts.append(load_ground_truth(gt_path))
    report = evaluate(results, gts)
    write_report_csv(report, args.out)
    print(f"corloc {report.corloc:.4f}  miou {report.miou:.4f}  "
          f"mbo {report.mbo:.4f}  ({len(report.per_image)} images, "
          f"{report.skipped} skipped)")
    return 0


def _cmd_mask_preview(args: argparse.Namespace) -> int:
    fmap = load_features(args.features)
    cfg = MaskingConfig(args.strategy, args.m, args.seed)
    _, report = masked_map(fmap, cfg)
    print(format_report(report, args.m))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotforge",
        description="Masked multi-query slot attention over patch tokens")
    parser.add_argument("--version", action="version",
                        version=f"slotforge {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="print per-file / per-run progress")
    # accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS,
                        help="print per-file / per-run progress")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=lambda **kw: argparse.ArgumentParser(
                                    parents=[common], **kw))

    gen = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, default=64)
    gen.add_argument("--grid-h", type=int, default=8)
    gen.add_argument("--grid-w", type=int, default=8)
    gen.add_argument("--objects", type=int, default=2)
    gen.add_argument("--d-feats", type=int, default=16)
    gen.add_argument("--bg-mean", type=float, default=2.0)
    gen.add_argument("--obj-lo", type=float, default=0.0)
    gen.add_argument("--obj-hi", type=float, default=0.5)
    gen.add_argument("--noise-std", type=float, default=0.05)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=_cmd_gen_synthetic)

    tr = sub.add_parser("train", help="train on a generated dataset")
    tr.add_argument("--data", required=True, help="dir with manifest.csv")
    tr.add_argument("--config", help="key=value config file")
    tr.add_argument("--out", required=True)
    tr.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="config override, repeatable")
    tr.set_defaults(func=_cmd_train)

    inf = sub.add_parser("infer", help="segment feature maps with a checkpoint")
    inf.add_argument("--features", required=True, help="dir of .feat files")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--fusion-metric", choices=["cosine", "euclidean"],
                     default="cosine")
    inf.add_argument("--fusion-matcher", choices=["hungarian", "greedy"],
                     default="hungarian")
    inf.add_argument("--reference-head", default="random",
                     help="'random' or a head index")
    inf.add_argument("--heads", type=int, default=None,
                     help="fuse only the first N heads")
    inf.add_argument("--mask-source", choices=["alphas", "attention"],
                     default="alphas")
    inf.add_argument("--seed", type=int, default=0)
    inf.add_argument("--dump-slots", action="store_true")
    inf.set_defaults(func=_cmd_infer)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True, help="dir of .pred label grids")
    ev.add_argument("--gt", required=True, help="dir of .gt label grids")
    ev.add_argument("--out", required=True, help="report CSV path")
    ev.set_defaults(func=_cmd_eval)

    mp = sub.add_parser("mask-preview", help="dump a mask report for one map")
    mp.add_argument("--features", required=True)
    mp.add_argument("--m", type=float, default=70.0)
    mp.add_argument("--strategy", choices=["none", "random", "background"],
                    default="background")
    mp.add_argument("--seed", type=int, default=0)
    mp.set_defaults(func=_cmd_mask_preview)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
