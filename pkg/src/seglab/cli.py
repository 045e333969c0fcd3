"""Command-line entry point for reproducible experiments.

Configuration comes from three layers with one precedence order:
built-in defaults, then a JSON config file of flat dotted keys, then
repeated --set key=value overrides, then named flags. Unknown keys are
rejected outright. Every subcommand writes its fully resolved
configuration into the output directory before doing any work.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 experiment failure.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

from .dataio import (DatasetSpec, FormatError, generate_dataset, load_dataset,
                     save_dataset)
from .metrics import (ConfusionMatrix, group_miou, iou_per_class, miou,
                      overlap_ratio, write_per_class_csv, write_summary_json)
from .network import load_checkpoint, predict_argmax, softmax_probs
from .trainer import TrainConfig, run_experiment
from . import pseudo


class ConfigError(Exception):
    pass


# Dotted config keys accepted by train-like subcommands, mapped to
# TrainConfig attributes.
TRAIN_KEYS = {
    "mode": "mode",
    "strategy": "strategy",
    "gamma": "gamma",
    "fraction": "fraction",
    "max_iter": "max_iter",
    "eval_every": "eval_every",
    "batch.labeled": "batch_labeled",
    "batch.unlabeled": "batch_unlabeled",
    "opt.lr0": "lr0",
    "opt.momentum": "momentum",
    "opt.weight_decay": "weight_decay",
    "opt.poly_power": "poly_power",
    "net.hidden": "hidden",
    "seed.net_c": "seed_net_c",
    "seed.net_p": "seed_net_p",
    "seed.data": "seed_data",
    "seed.augment": "seed_augment",
    "cutmix.rects": "cutmix_rects",
    "cutmix.area_min": "cutmix_area_min",
    "cutmix.area_max": "cutmix_area_max",
    "infer.branch": "infer_branch",
    "data.train": "dataset_dir",
    "data.val": "val_dir",
}

DATA_KEYS = {
    "samples": "num_samples",
    "height": "height",
    "width": "width",
    "classes": "num_classes",
    "noise_sigma": "noise_sigma",
    "seed": "rng_seed",
}


def _load_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _parse_set(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got '{item}'")
        key, _, raw = item.partition("=")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _apply(obj, updates, keys):
    for key, value in updates.items():
        if key not in keys:
            raise ConfigError(
                f"unknown config key '{key}' (known: {sorted(keys)})")
        attr = keys[key]
        if attr == "hidden":
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"net.hidden must be a list, got {value!r}")
            value = tuple(int(v) for v in value)
        setattr(obj, attr, value)


def _resolve_train_config(args):
    cfg = TrainConfig()
    if args.config:
        _apply(cfg, _load_config_file(args.config), TRAIN_KEYS)
    _apply(cfg, _parse_set(args.set), TRAIN_KEYS)
    flag_map = {
        "mode": "mode", "strategy": "strategy", "fraction": "fraction",
        "gamma": "gamma", "iters": "max_iter",
        "seed_net_c": "seed_net_c", "seed_net_p": "seed_net_p",
        "seed_data": "seed_data", "seed_augment": "seed_augment",
        "dataset": "dataset_dir", "val": "val_dir",
    }
    for flag, attr in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    cfg.out_dir = args.out
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e))
    return cfg


def _echo_config(doc, out_dir, name="config.json"):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    print(json.dumps(doc))
    return path


def cmd_gen_data(args):
    spec = DatasetSpec()
    updates = {}
    if args.config:
        updates.update(_load_config_file(args.config))
    updates.update(_parse_set(args.set))
    for flag, key in (("samples", "samples"), ("height", "height"),
                      ("width", "width"), ("classes", "classes"),
                      ("noise_sigma", "noise_sigma"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    fields = {}
    for key, value in updates.items():
        if key not in DATA_KEYS:
            raise ConfigError(
                f"unknown config key '{key}' (known: {sorted(DATA_KEYS)})")
        fields[DATA_KEYS[key]] = value
    try:
        spec = DatasetSpec(**{**asdict(spec), **fields})
    except ValueError as e:
        raise ConfigError(str(e))
    _echo_config(asdict(spec), args.out)
    samples = generate_dataset(spec)
    save_dataset(samples, args.out, spec)
    labeled = sum(1 for s in samples if s.label is not None)
    print(f"wrote {len(samples)} samples ({labeled} labeled), "
          f"{spec.height}x{spec.width}, {spec.num_classes} classes "
          f"-> {args.out}")
    return 0


def cmd_train(args):
    cfg = _resolve_train_config(args)
    _echo_config(asdict(cfg), cfg.out_dir)
    report = run_experiment(cfg)
    print(f"mode={cfg.mode} final_miou={report.final_miou!r} "
          f"-> {cfg.out_dir}")
    return 0


ABLATION_ROWS = (
    ("supervised-only", "supervised-only", None),
    ("intersection-only", "intersection-only", None),
    ("union-only", "union-only", None),
    ("mutual-direct", "mutual-direct", None),
    ("cpcl-no-dynamic-loss", "cpcl-no-dynamic-loss", None),
    ("cpcl", "cpcl", None),
)

STRATEGY_ROWS = tuple(
    (f"strategy-{s}", "cpcl", s) for s in pseudo.STRATEGIES)


def _run_rows(args, rows, csv_name):
    base = _resolve_train_config(args)
    _echo_config(asdict(base), args.out)
    results = []
    failed = False
    for name, mode, strategy in rows:
        cfg = TrainConfig(**asdict(base))
        cfg.mode = mode
        if strategy is not None:
            cfg.strategy = strategy
        cfg.out_dir = os.path.join(args.out, name)
        try:
            report = run_experiment(cfg)
            results.append((name, mode, cfg.strategy,
                            repr(report.final_miou), "ok"))
            print(f"{name}: final_miou={report.final_miou!r}")
        except Exception as e:
            failed = True
            results.append((name, mode, cfg.strategy, "", f"failed: {e}"))
            print(f"{name}: FAILED: {e}", file=sys.stderr)
    path = os.path.join(args.out, csv_name)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "mode", "strategy", "final_miou", "status"])
        writer.writerows(results)
    print(f"wrote {path}")
    return 4 if failed else 0


def cmd_ablate(args):
    return _run_rows(args, ABLATION_ROWS + STRATEGY_ROWS, "ablation.csv")


def cmd_labeling_bench(args):
    return _run_rows(args, STRATEGY_ROWS, "strategies.csv")


def cmd_eval(args):
    doc = {"checkpoint": args.checkpoint, "checkpoint_b": args.checkpoint_b,
           "dataset": args.dataset, "out": args.out}
    _echo_config(doc, args.out)
    net = load_checkpoint(args.checkpoint)
    samples, spec = load_dataset(args.dataset)
    if any(s.label is None for s in samples):
        raise FormatError(
            f"dataset {args.dataset} has unlabeled samples, cannot score")
    other = load_checkpoint(args.checkpoint_b) if args.checkpoint_b else None
    cm = ConfusionMatrix(spec.num_classes)
    overlaps = []
    for s in samples:
        pred = predict_argmax(softmax_probs(net.forward(s.image,
                                                        train=False)))
        cm.accumulate(s.label, pred)
        if other is not None:
            pred_b = predict_argmax(softmax_probs(other.forward(
                s.image, train=False)))
            overlaps.append(overlap_ratio(pred, pred_b))
    iou = iou_per_class(cm)
    # class 0 is always the generator's background
    groups = {c: "background" if c == 0 else "shapes"
              for c in range(spec.num_classes)}
    summary = {
        "miou": miou(cm),
        "per_class_iou": [None if v != v else float(v) for v in iou],
        "group_miou": {name: None if v != v else float(v)
                       for name, v in group_miou(cm, groups).items()},
        "num_samples": len(samples),
    }
    if overlaps:
        summary["overlap"] = float(sum(overlaps) / len(overlaps))
    write_per_class_csv(os.path.join(args.out, "per_class_iou.csv"), iou)
    write_summary_json(os.path.join(args.out, "summary.json"), summary)
    print(f"miou={summary['miou']!r} -> {args.out}")
    return 0


def cmd_report(args):
    from . import report as rpt
    if not args.run and not args.dataset:
        raise ConfigError("report needs at least one --run or --dataset")
    # A distinct file name: run directories already own a config.json.
    _echo_config({"runs": args.run or [], "datasets": args.dataset or []},
                 args.out or (args.run or args.dataset)[0],
                 name="report-config.json")
    written = []
    rows = []
    for run_dir in args.run or ():
        written.extend(rpt.render_run(run_dir))
        with open(os.path.join(run_dir, "report.json"), "r",
                  encoding="utf-8") as f:
            doc = json.load(f)
        rows.append((os.path.basename(os.path.normpath(run_dir)),
                     doc["final"]["miou"]))
    for ds in args.dataset or ():
        written.append(rpt.render_dataset_preview(ds))
    if args.out and rows:
        os.makedirs(args.out, exist_ok=True)
        cmp_path = os.path.join(args.out, "comparison_miou.png")
        rpt.plot_comparison(rows, cmp_path)
        written.append(cmp_path)
        sum_path = os.path.join(args.out, "summary.csv")
        with open(sum_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["run", "final_miou"])
            for name, value in rows:
                writer.writerow([name, repr(value)])
        written.append(sum_path)
    for path in written:
        print(f"wrote {path}")
    return 0


def _add_common(p):
    p.add_argument("--config", help="JSON config file of dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", required=True, help="output directory")


def _add_train_flags(p):
    p.add_argument("--mode")
    p.add_argument("--strategy")
    p.add_argument("--fraction")
    p.add_argument("--gamma", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed-net-c", type=int, dest="seed_net_c")
    p.add_argument("--seed-net-p", type=int, dest="seed_net_p")
    p.add_argument("--seed-data", type=int, dest="seed_data")
    p.add_argument("--seed-augment", type=int, dest="seed_augment")
    p.add_argument("--dataset", help="training dataset directory")
    p.add_argument("--val", help="validation dataset directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="seglab",
        description="Semi-supervised segmentation lab on synthetic shapes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--samples", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training configuration")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate",
                       help="run every variant and strategy on shared seeds")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("labeling-bench",
                       help="run the disagreement labeling strategies")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_labeling_bench)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint stem (expects <stem>.json and <stem>.f64)")
    p.add_argument("--checkpoint-b", dest="checkpoint_b",
                   help="second checkpoint stem for branch overlap")
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render figures for finished runs")
    p.add_argument("--run", action="append", help="run directory (repeatable)")
    p.add_argument("--dataset", action="append",
                   help="dataset directory to preview (repeatable)")
    p.add_argument("--out", help="directory for cross-run comparison files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"experiment failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
