"""Command-line driver: synth | train | eval | predict | gradcheck | ablate.

Exit codes: 0 success, 1 contract/configuration violation, 2 I/O error,
3 failed gradient check.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .data import load_sample, read_manifest, synth_generate, \
    write_image_u8, write_manifest, write_mask
from .errors import ContractViolation, DataIOError, GradCheckError
from .metrics import MetricReport
from .train import TrainConfig, ablate, ablation_csv, evaluate, gradcheck, \
    load_checkpoint, save_checkpoint, train


def _add_train_flags(p):
    p.add_argument("--variant", default="full",
                   choices=["bas", "mam", "mam_hfem", "full"])
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--wd", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mlffnet",
        description="Multi-level feature fusion segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a variant on a manifest")
    _add_train_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training-log CSV path")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--csv", help="metric report CSV path")

    p = sub.add_parser("predict", help="write prediction masks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--all-heads", action="store_true",
                   help="also write the p2/p3 heads")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--variant", default="full",
                   choices=["bas", "mam", "mam_hfem", "full"])
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train and score all four variants")
    _add_train_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--eval-manifest", help="defaults to the training manifest")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", help="ablation grid CSV path")
    return parser


def _load_manifest_samples(path, size):
    manifest = read_manifest(path)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    samples = [
        load_sample(resolve(img), resolve(mask), target=(size, size))
        for img, mask in manifest.entries
    ]
    return manifest, samples


def _cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    samples = synth_generate(args.seed, args.count, args.size)
    entries = []
    for s in samples:
        img_path = os.path.join(args.out, f"{s.id}.ppm")
        mask_path = os.path.join(args.out, f"{s.id}_mask.pgm")
        rgb = np.floor(s.image.data[0].transpose(1, 2, 0) * 255.0 + 0.5)
        write_image_u8(img_path, rgb.astype("uint8"))
        write_mask(s.mask, mask_path)
        entries.append((f"{s.id}.ppm", f"{s.id}_mask.pgm"))
    write_manifest(os.path.join(args.out, "manifest.tsv"), entries)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _train_cfg(args):
    return TrainConfig(variant=args.variant, lr=args.lr, weight_decay=args.wd,
                       steps=args.steps, batch=args.batch, seed=args.seed)


def _cmd_train(args):
    _, samples = _load_manifest_samples(args.manifest, args.size)
    cfg = _train_cfg(args)
    result = train(cfg, samples)
    save_checkpoint(args.out, result.model, cfg, cfg.steps, result.optimizer)
    if args.log:
        with open(args.log, "w") as fh:
            fh.write(result.log_csv())
    final = result.log[-1].split(",")[1]
    print(f"trained {cfg.variant} for {cfg.steps} steps; final loss {final}")
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_eval(args):
    manifest, samples = _load_manifest_samples(args.manifest, args.size)
    model, meta, _ = load_checkpoint(args.ckpt)
    report = evaluate(model, samples)
    row = report.csv_row(manifest.name, meta["variant"])
    print(MetricReport.CSV_HEADER)
    print(row)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(MetricReport.CSV_HEADER + "\n" + row + "\n")
    return 0


def _cmd_predict(args):
    _, samples = _load_manifest_samples(args.manifest, args.size)
    model, _, _ = load_checkpoint(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    model.set_training(False)
    for s in samples:
        preds = model.forward(s.image)
        write_mask(preds.p1, os.path.join(args.out, f"{s.id}_p1.pgm"))
        if args.all_heads:
            write_mask(preds.p2, os.path.join(args.out, f"{s.id}_p2.pgm"))
            write_mask(preds.p3, os.path.join(args.out, f"{s.id}_p3.pgm"))
    print(f"wrote predictions for {len(samples)} samples to {args.out}")
    return 0


def _cmd_gradcheck(args):
    try:
        report = gradcheck(args.variant, seed=args.seed)
    except GradCheckError as exc:
        print(str(exc), file=sys.stderr)
        return 3
    print(
        f"gradcheck {args.variant}: max rel err {report['max_rel_err']:.3e} "
        f"({report['worst_param']}) over {report['checked']} samples -> PASS"
    )
    return 0


def _cmd_ablate(args):
    _, train_samples = _load_manifest_samples(args.manifest, args.size)
    eval_path = args.eval_manifest or args.manifest
    eval_manifest, eval_samples = _load_manifest_samples(eval_path, args.size)
    cfg = _train_cfg(args)
    rows = ablate(cfg, train_samples, {eval_manifest.name: eval_samples})
    csv = ablation_csv(rows)
    print(csv, end="")
    for row in rows:
        print(f"# {row['label']}: params={row['param_count']} "
              f"loss {row['first_loss']:.4f} -> {row['final_loss']:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GradCheckError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (DataIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
