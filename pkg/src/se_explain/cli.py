"""Command-line entry point: ``se-explain {train,explain,metrics,ablate,distfit}``.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import DataParseError, DatasetNotFound, load_dataset
from .explain import overlay, read_image, saliency_for, to_rgb8, write_png, write_ppm
from .metrics import DEFAULT_STEPS, evaluate_method
from .model import build_smallcnn, forward_ablated
from .se import aggregate_se_values
from .train import TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
DATASETS = ("cifar10", "cifar100", "mnist")
METHODS = ("se", "gradcam", "random")
DEFAULT_FRACTIONS = "0.10,0.25,0.50,0.75,1.0"
METRICS_SCHEMA_KEYS = (
    "method", "n_images", "steps", "deletion_auc_mean", "deletion_auc_std",
    "insertion_auc_mean", "insertion_auc_std",
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _non_negative(name):
    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}") from None
        if not value >= 0:
            raise argparse.ArgumentTypeError(f"{name} must be non-negative, got {text}")
        return value
    return parse


def _positive_int(name):
    def parse(text):
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if value < 1:
            raise argparse.ArgumentTypeError(f"{name} must be at least 1, got {text}")
        return value
    return parse


def _unit_fraction(name):
    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}") from None
        if not 0.0 < value <= 1.0:
            raise argparse.ArgumentTypeError(f"{name} must be in (0, 1], got {text}")
        return value
    return parse


def _alpha(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--alpha must be a number, got {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"--alpha must be in [0, 1], got {text}")
    return value


def _fraction_list(text):
    parse = _unit_fraction("--fractions")
    return [parse(t) for t in text.split(",") if t.strip()]


def build_parser():
    p = _Parser(prog="se-explain", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_flags(sp, required=True):
        sp.add_argument("--data", choices=DATASETS, required=required)
        sp.add_argument("--dir", default=None,
                        help="dataset root (default: $SE_EXPLAIN_DATA_DIR)")

    t = sub.add_parser("train", help="train SmallCNN with or without the SE block")
    data_flags(t)
    t.add_argument("--se", dest="se", action="store_true", default=True)
    t.add_argument("--no-se", dest="se", action="store_false")
    t.add_argument("--epochs", type=_positive_int("--epochs"), default=20)
    t.add_argument("--lr", type=_non_negative("--lr"), default=0.001)
    t.add_argument("--momentum", type=_non_negative("--momentum"), default=0.9)
    t.add_argument("--weight-decay", type=_non_negative("--weight-decay"), default=0.0005)
    t.add_argument("--batch", type=_positive_int("--batch"), default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--subset", type=_unit_fraction("--subset"), default=1.0)
    t.add_argument("--reduction", type=_positive_int("--reduction"), default=16)
    t.add_argument("--no-augment", dest="augment", action="store_false")
    t.add_argument("--out", default=None)

    e = sub.add_parser("explain", help="render a saliency heatmap for one image")
    e.add_argument("--model", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--index", type=int)
    data_flags(e, required=False)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--method", choices=METHODS, default="se")
    e.add_argument("--top-frac", type=_unit_fraction("--top-frac"), default=0.10)
    e.add_argument("--alpha", type=_alpha, default=0.5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--dump-saliency", action="store_true")
    e.add_argument("--out", required=True)

    m = sub.add_parser("metrics", help="deletion/insertion AUC over test images")
    m.add_argument("--model", required=True)
    data_flags(m)
    m.add_argument("--method", choices=METHODS, default="se")
    m.add_argument("--n", type=_positive_int("--n"), default=200)
    m.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--top-frac", type=_unit_fraction("--top-frac"), default=0.10)
    m.add_argument("--jobs", type=_positive_int("--jobs"), default=os.cpu_count() or 1)
    m.add_argument("--csv", default=None, help="optional per-image CSV")
    m.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="accuracy when only the top SE channels are kept")
    a.add_argument("--model", required=True)
    data_flags(a)
    a.add_argument("--fractions", type=_fraction_list, default=_fraction_list(DEFAULT_FRACTIONS))
    a.add_argument("--control", choices=("none", "random"), default="none")
    a.add_argument("--control-seeds", type=_positive_int("--control-seeds"), default=5)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)

    d = sub.add_parser("distfit", help="pooled SE value histogram and moments")
    d.add_argument("--model", required=True)
    data_flags(d)
    d.add_argument("--max-samples", type=_positive_int("--max-samples"), default=2000)
    d.add_argument("--bins", type=_positive_int("--bins"), default=61)
    d.add_argument("--out", required=True, help="output prefix")
    return p


# --------------------------------------------------------------- subcommands


def _load_split(args, split):
    return load_dataset(args.data, args.dir, split)


def _load_model(path, need_se=False):
    model = ckpt.load_checkpoint(path)
    if need_se and not model.se_enabled:
        raise UsageError(f"checkpoint {path} has no SE block; this command needs an SE model")
    return model


def cmd_train(args):
    cfg = TrainConfig(
        lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay, epochs=args.epochs,
        batch_size=args.batch, seed=args.seed, dataset=args.data, se_enabled=args.se,
        subset_fraction=args.subset, augment=args.augment,
    )
    out = Path(args.out or f"model_{args.data}_{'se' if args.se else 'nose'}.ckpt")
    train_split = _load_split(args, "train")
    test_split = _load_split(args, "test")
    c, h, w = train_split.image_shape
    if h % 4 or w % 4:
        raise DataError(f"image size {h}x{w} is not divisible by 4")
    model = build_smallcnn(train_split.num_classes, (c, h, w), args.se, args.reduction, seed=args.seed)
    model, history = train(model, train_split, cfg, test_split)
    ckpt.save_checkpoint(model, out)
    history.write_csv(history_path(out))
    return EXIT_OK


def history_path(ckpt_path):
    p = Path(ckpt_path)
    return p.with_name(p.stem + ".history.csv")


def _input_image(args, model):
    c, h, w = model.input_shape
    if args.image is not None:
        try:
            rgb = read_image(args.image)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read image {args.image}: {exc}") from None
        if rgb.shape[:2] != (h, w):
            raise DataError(f"image is {rgb.shape[1]}x{rgb.shape[0]}, model expects {w}x{h}")
        chw = rgb.transpose(2, 0, 1).astype(np.float32) / 255.0
        if c == 1:
            chw = chw.mean(axis=0, keepdims=True)
        return chw
    if args.data is None:
        raise UsageError("--index needs --data")
    split = _load_split(args, args.split)
    if not 0 <= args.index < len(split):
        raise UsageError(f"--index {args.index} outside [0, {len(split)})")
    return split.image(args.index)


def cmd_explain(args):
    model = _load_model(args.model, need_se=args.method == "se")
    image = _input_image(args, model)
    sal = saliency_for(args.method, model, image, seed=args.seed, fraction=args.top_frac)
    rgb = read_image(args.image) if args.image is not None and model.input_shape[0] == 3 else to_rgb8(image)
    heat = overlay(rgb, sal, args.alpha)
    out = Path(args.out)
    if out.suffix.lower() == ".png":
        if not write_png(out, heat.pixels):
            out = out.with_suffix(".ppm")
            write_ppm(out, heat.pixels)
    else:
        write_ppm(out, heat.pixels)
    if args.dump_saliency:
        np.savetxt(saliency_csv_path(out), sal.values, delimiter=",", fmt="%.17g")
    return EXIT_OK


def saliency_csv_path(image_path):
    p = Path(image_path)
    return p.with_name(p.stem + ".saliency.csv")


def cmd_metrics(args):
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    model = _load_model(args.model, need_se=args.method == "se")
    split = _load_split(args, "test")
    n = args.n
    if n > len(split):
        print(f"warning: --n {n} exceeds the {len(split)} test images; using {len(split)}",
              file=sys.stderr)
        n = len(split)
    summary = evaluate_method(model, split, args.method, n, args.steps, args.seed,
                              args.top_frac, jobs=args.jobs)
    Path(args.out).write_text(json.dumps(summary.to_json_dict(), indent=2) + "\n")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["image_id", "deletion_auc", "insertion_auc"])
            for r in summary.records:
                wr.writerow([r.image_id, repr(r.deletion_auc), repr(r.insertion_auc)])
    return EXIT_OK


def ablation_table(model, split, fractions, control=False, control_seeds=5, seed=0):
    """Rows of (fraction, accuracy[, mean random-control accuracy])."""
    rows = []
    for f in fractions:
        acc = evaluate(model, split, logits_fn=lambda x, f=f: forward_ablated(model, x, f))
        row = [f, acc]
        if control:
            accs = []
            for k in range(control_seeds):
                rng = np.random.default_rng([seed, k])
                accs.append(evaluate(model, split,
                                     logits_fn=lambda x, f=f, rng=rng: forward_ablated(model, x, f, rng)))
            row.append(float(np.mean(accs)))
        rows.append(row)
    return rows


def cmd_ablate(args):
    model = _load_model(args.model, need_se=True)
    split = _load_split(args, "test")
    control = args.control == "random"
    rows = ablation_table(model, split, args.fractions, control, args.control_seeds, args.seed)
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["fraction", "accuracy"] + (["control_accuracy"] if control else []))
        for row in rows:
            wr.writerow([repr(v) for v in row])
    return EXIT_OK


def cmd_distfit(args):
    model = _load_model(args.model, need_se=True)
    split = _load_split(args, "test")
    dist = aggregate_se_values(model, split.batches(256), args.max_samples)
    counts, edges = np.histogram(dist.values, bins=args.bins)
    prefix = Path(args.out)
    with open(prefix.with_name(prefix.name + ".hist.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            wr.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    moments = {
        "mu": dist.mu, "sigma": dist.sigma, "skewness": dist.skewness,
        "excess_kurtosis": dist.excess_kurtosis, "raw_mean": dist.raw_mean,
        "n_samples": dist.n_samples, "n_values": int(dist.values.size),
    }
    prefix.with_name(prefix.name + ".moments.json").write_text(json.dumps(moments, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "explain": cmd_explain, "metrics": cmd_metrics,
    "ablate": cmd_ablate, "distfit": cmd_distfit,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"se-explain: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetNotFound, DataParseError, ckpt.CheckpointError, DataError) as exc:
        print(f"se-explain: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"se-explain: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except Exception as exc:  # noqa: BLE001
        print(f"se-explain: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
