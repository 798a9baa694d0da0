"""Command-line front end: ``gpca {approx-study,bench,train,masks,verify}``.

Every command takes an optional JSON config (``--config``); unknown keys
are rejected. The resolved configuration is written next to the outputs.
Exit codes: 0 success, 1 runtime or property failure, 2 usage/config error.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from .beta_approx import (COMPETITORS, DEFAULT_GRID, TABLE_COLUMNS, ApproxKind, comparison_table)
from .bench import bench_scaling
from .plots import bar_chart, line_chart
from .verify import PROPERTIES, VerifyContext, run_properties

log = logging.getLogger("gpca")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


class UsageError(Exception):
    pass


DEFAULTS = {
    "approx-study": {
        "grid": None,
        "grid_values": list(DEFAULT_GRID),
        "abs_tol": 1e-8,
        "temperature": 1.0,
        "svg": False,
    },
    "bench": {
        "c_values": [64, 128, 256, 512],
        "spatial": 16,
        "repetitions": 11,
        "warmups": 3,
        "variants": ["full", "local", "mha"],
        "group_size": 16,
        "batch": 32,
        "svg": False,
    },
    "train": {
        "slots": ["None", "GPCA_Full"],
        "seeds": None,
        "model": {},
        "sgd": {},
        "dataset": {"train": None, "test": None},
        "use_synthetic": False,
        "synthetic": {"train_per_class": 500, "test_per_class": 100, "noise": 0.6, "seed": 0},
        "save_model": True,
        "mask_bins": 20,
        "svg": False,
    },
    "masks": {
        "model": None,
        "dataset": {"test": None},
        "use_synthetic": False,
        "synthetic": {"train_per_class": 0, "test_per_class": 100, "noise": 0.6, "seed": 0},
        "bins": 20,
    },
    "verify": {
        "properties": None,
        "perturb_lambda": 1.0,
    },
}


# ---------------------------------------------------------------------------
# helpers


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "{:.17g}".format(float(value))
    return str(value)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _merge(defaults, overrides, where):
    unknown = sorted(set(overrides) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config key(s) in {where}: {', '.join(unknown)}")
    out = dict(defaults)
    for key, value in overrides.items():
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge(defaults[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def load_config(command, path):
    defaults = json.loads(json.dumps(DEFAULTS[command]))
    if path is None:
        return defaults
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{p}: top level must be an object")
    # model/sgd sections are checked against their dataclasses instead
    free = {"model", "sgd"} if command == "train" else set()
    checked = {k: v for k, v in raw.items() if k not in free}
    merged = _merge(defaults, checked, "config")
    for key in free & set(raw):
        if not isinstance(raw[key], dict):
            raise UsageError(f"config.{key} must be an object")
        merged[key] = raw[key]
    return merged


def _dataclass_from(cls, values, where):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise UsageError(f"unknown config key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except nn.ConfigError as exc:
        raise UsageError(f"{where}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{where}: {exc}") from exc


def _write_resolved(out_dir, command, cfg, args):
    resolved = {"command": command, "seed": args.seed, "threads": args.threads, **cfg}
    with open(Path(out_dir) / "resolved_config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_approx_study(args, cfg):
    grid = cfg["grid"]
    if grid is None:
        grid = [(a, b) for a in cfg["grid_values"] for b in cfg["grid_values"]]
    try:
        grid = [(float(a), float(b)) for a, b in grid]
    except (TypeError, ValueError) as exc:
        raise UsageError(f"grid must be a list of [alpha, beta] pairs ({exc})") from exc
    if not grid:
        raise UsageError("grid is empty")
    if any(not (a > 0 and b > 0 and math.isfinite(a) and math.isfinite(b)) for a, b in grid):
        raise UsageError("alpha and beta must be positive and finite")
    abs_tol = float(cfg["abs_tol"])
    if not abs_tol > 0:
        raise UsageError("abs_tol must be positive")
    out = _out_dir(args)
    _write_resolved(out, "approx-study", cfg, args)
    table = comparison_table(grid, abs_tol, float(cfg["temperature"]))
    kinds = (ApproxKind.SIGMOID_GAUSSIAN,) + COMPETITORS
    long_rows, failures = [], []
    for row in table:
        best = row.sigmoid_gaussian_is_best
        if not best:
            failures.append(row)
        for kind in kinds:
            est = row.kl.get(kind)
            long_rows.append({
                "alpha": row.alpha, "beta": row.beta, "approximation": kind.value,
                "defined": est is not None,
                "kl": est.value if est else float("nan"),
                "kl_abs_error": est.abs_error if est else float("nan"),
                "leaked_mass": row.leaked.get(kind, 0.0 if est else float("nan")),
                "sigmoid_gaussian_best": best,
                "note": (f"location=log(alpha/beta), temperature={float(cfg['temperature']):g}"
                         if kind is ApproxKind.CONCRETE else ""),
            })
    write_csv(out / "approx_study.csv",
              ["alpha", "beta", "approximation", "defined", "kl", "kl_abs_error", "leaked_mass",
               "sigmoid_gaussian_best", "note"], long_rows)
    write_csv(out / "approx_table.csv", list(TABLE_COLUMNS), [r.as_record() for r in table])
    if cfg["svg"]:
        bar_chart([f"({r.alpha:g},{r.beta:g})" for r in table], [k.value for k in kinds],
                  [[r.kl[k].value if k in r.kl else float("nan") for k in kinds] for r in table],
                  out / "approx_study.svg", "KL(q || beta)", "KL")
    for row in failures:
        sg = row.kl[ApproxKind.SIGMOID_GAUSSIAN].value
        rival, rest = min(((k, e.value) for k, e in row.kl.items() if k is not ApproxKind.SIGMOID_GAUSSIAN),
                          key=lambda kv: kv[1])
        print(f"ordering fails at (alpha={row.alpha:g}, beta={row.beta:g}): sigmoid_gaussian KL {sg:.6g} "
              f"> {rival.value} KL {rest:.6g}", file=sys.stderr)
    print(f"{len(table) - len(failures)}/{len(table)} grid points with sigmoid-Gaussian lowest KL")
    return EXIT_FAIL if failures else EXIT_OK


def cmd_bench(args, cfg):
    reps, warm = int(cfg["repetitions"]), int(cfg["warmups"])
    if reps < 11 or warm < 3:
        raise UsageError("timing needs repetitions >= 11 and warmups >= 3")
    c_values = [int(c) for c in cfg["c_values"]]
    if len(set(c_values)) < 3 or min(c_values) < 2:
        raise UsageError("need at least three distinct C values, each >= 2")
    for v in cfg["variants"]:
        if str(v).lower() not in ("full", "local", "mha"):
            raise UsageError(f"unknown variant {v!r}")
    if int(cfg["batch"]) < 1 or int(cfg["spatial"]) < 1 or int(cfg["group_size"]) < 2:
        raise UsageError("batch and spatial must be >= 1, group_size >= 2")
    out = _out_dir(args)
    _write_resolved(out, "bench", cfg, args)
    rows = bench_scaling(c_values, int(cfg["spatial"]), reps, warm, cfg["variants"],
                         int(cfg["group_size"]), int(cfg["batch"]), args.seed)
    write_csv(out / "bench.csv", ["C", "variant", "median_ns", "fitted_slope"], [vars(r) for r in rows])
    slopes = {}
    for r in rows:
        slopes[r.variant] = r.fitted_slope
    for name, slope in slopes.items():
        print(f"{name}: fitted log-log slope {slope:.3f}")
    if cfg["svg"]:
        series = {}
        for r in rows:
            xs, ys = series.setdefault(r.variant, ([], []))
            xs.append(r.C)
            ys.append(r.median_ns / 1e6)
        line_chart(series, out / "bench.svg", "forward time vs channels", "C", "median ms", log=True)
    return EXIT_OK


def _load_split(path, what):
    if path is None:
        raise UsageError(f"no {what} dataset: set dataset.{what} in the config or pass --synthetic")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"dataset file not found: {p}")
    try:
        return nn.read_dataset(p)
    except nn.ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _datasets(args, cfg, need_train=True):
    if args.synthetic or cfg["use_synthetic"]:
        syn = cfg["synthetic"]
        return nn.make_synthetic(int(syn["train_per_class"]), int(syn["test_per_class"]),
                                 int(syn["seed"]), noise=float(syn["noise"]))
    train = _load_split(cfg["dataset"].get("train"), "train") if need_train else None
    test_path = cfg["dataset"].get("test")
    test = _load_split(test_path, "test") if (test_path is not None or not need_train) else None
    return train, test


def _stats_rows(stats):
    rows = []
    for c in range(len(stats.channel_mean)):
        row = {"channel": c, "mean": stats.channel_mean[c], "std": stats.channel_std[c]}
        for k in range(stats.class_means.shape[0]):
            row[f"class_{k}"] = stats.class_means[k, c]
        rows.append(row)
    cols = ["channel", "mean", "std"] + [f"class_{k}" for k in range(stats.class_means.shape[0])]
    hist = [{"bin_lo": lo, "bin_hi": hi, "count": int(n)} for lo, hi, n in
            zip(stats.histogram_edges[:-1], stats.histogram_edges[1:], stats.histogram_counts)]
    return cols, rows, hist


def _write_mask_stats(out, stem, stats):
    cols, rows, hist = _stats_rows(stats)
    write_csv(out / f"{stem}_channels.csv", cols, rows)
    write_csv(out / f"{stem}_histogram.csv", ["bin_lo", "bin_hi", "count"], hist)
    write_csv(out / f"{stem}_summary.csv", ["dispersion", "count"],
              [{"dispersion": stats.dispersion, "count": stats.count}])


def cmd_train(args, cfg):
    slots = [nn.Slot.parse(s) if s is not None else nn.Slot.NONE for s in cfg["slots"]] if cfg["slots"] else []
    if not slots:
        raise UsageError("no slots to train")
    seeds = cfg["seeds"] if cfg["seeds"] is not None else [args.seed]
    seeds = [int(s) for s in seeds]
    train_set, test_set = _datasets(args, cfg)
    model_cfg = dict(cfg["model"])
    model_cfg.setdefault("num_classes", train_set.num_classes)
    model_cfg.setdefault("input_shape", list(train_set.images.shape[1:]))
    configs = {s: _dataclass_from(nn.TinyCnnConfig, {**model_cfg, "attention_slot": s.value}, "config.model")
               for s in slots}
    _dataclass_from(nn.SgdConfig, cfg["sgd"], "config.sgd")
    out = _out_dir(args)
    _write_resolved(out, "train", cfg, args)
    summary = []
    curves = {}
    for slot in slots:
        accs = []
        for seed in seeds:
            model = nn.build_model(configs[slot], seed)
            model.set_threads(args.threads)
            sgd = nn.SgdConfig(**{**cfg["sgd"], "seed": seed})
            stem = f"{slot.value}_seed{seed}"
            try:
                report = nn.train(model, train_set, sgd, test_set)
            except nn.DivergenceError as exc:
                print(f"{stem}: {exc}", file=sys.stderr)
                return EXIT_FAIL
            write_csv(out / f"train_{stem}.csv", list(nn.REPORT_COLUMNS), report.rows())
            if cfg["save_model"]:
                model.save(out / f"model_{stem}.npz")
            if model.attention is not None:
                eval_set = test_set if test_set is not None else train_set
                _write_mask_stats(out, f"masks_{stem}", nn.mask_statistics(model, eval_set, int(cfg["mask_bins"])))
            accs.append(report.final_test_acc)
            curves[stem] = ([r.epoch for r in report.records], [r.train_loss for r in report.records])
            print(f"{stem}: final test accuracy {report.final_test_acc:.4f}")
        accs = np.array(accs, dtype=float)
        summary.append({"slot": slot.value, "runs": len(accs), "mean_test_acc": float(np.mean(accs)),
                        "std_test_acc": float(np.std(accs)), "min_test_acc": float(np.min(accs)),
                        "max_test_acc": float(np.max(accs))})
    write_csv(out / "summary.csv", ["slot", "runs", "mean_test_acc", "std_test_acc", "min_test_acc",
                                    "max_test_acc"], summary)
    if cfg["svg"] and curves:
        line_chart(curves, out / "train_loss.svg", "training loss", "epoch", "loss")
    return EXIT_OK


def cmd_masks(args, cfg):
    if cfg["model"] is None:
        raise UsageError("masks needs config.model (path to a saved model)")
    model_path = Path(cfg["model"])
    if not model_path.is_file():
        raise UsageError(f"model file not found: {model_path}")
    _, test_set = _datasets(args, cfg, need_train=False)
    model = nn.load_model(model_path)
    model.set_threads(args.threads)
    out = _out_dir(args)
    _write_resolved(out, "masks", cfg, args)
    try:
        stats = nn.mask_statistics(model, test_set, int(cfg["bins"]))
    except nn.NoAttentionSlotError as exc:
        print(f"{model_path}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _write_mask_stats(out, "masks", stats)
    print(f"mask dispersion {stats.dispersion:.6g} over {stats.count} mask values")
    return EXIT_OK


def cmd_verify(args, cfg):
    if args.list:
        for prop in PROPERTIES:
            print(f"{prop.name}: {prop.description}")
        return EXIT_OK
    names = cfg["properties"]
    known = {p.name for p in PROPERTIES}
    if names is not None:
        bad = sorted(set(names) - known)
        if bad:
            raise UsageError(f"unknown properties: {', '.join(bad)}")
    factor = args.perturb_lambda if args.perturb_lambda is not None else float(cfg["perturb_lambda"])
    if not factor > 0:
        raise UsageError("perturb_lambda must be positive")
    ctx = VerifyContext(probit_lambda=VerifyContext().probit_lambda * factor)
    outcomes = run_properties(ctx, names)
    for o in outcomes:
        print(f"{'PASS' if o.passed else 'FAIL'} {o.name}: {o.detail} ({o.seconds:.2f}s)")
    if args.out is not None:
        out = _out_dir(args)
        _write_resolved(out, "verify", cfg, args)
        write_csv(out / "verify.csv", ["name", "passed", "detail", "seconds"], [vars(o) for o in outcomes])
    failed = [o.name for o in outcomes if not o.passed]
    print(f"{len(outcomes) - len(failed)}/{len(outcomes)} properties pass")
    return EXIT_FAIL if failed else EXIT_OK


COMMANDS = {
    "approx-study": cmd_approx_study,
    "bench": cmd_bench,
    "train": cmd_train,
    "masks": cmd_masks,
    "verify": cmd_verify,
}


def _u64(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with command parameters")
    common.add_argument("--seed", type=_u64, default=0, help="global seed (default 0)")
    common.add_argument("--out", help="output directory (default ./gpca_out; verify writes nothing unless set)")
    common.add_argument("--threads", type=_positive_int, default=1,
                        help="worker threads for per-sample attention work (results do not depend on it)")
    common.add_argument("--synthetic", action="store_true", help="use the bundled synthetic dataset")
    parser = argparse.ArgumentParser(prog="gpca", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("approx-study", parents=[common], help="KL comparison of beta approximations")
    sub.add_parser("bench", parents=[common], help="forward-time scaling in the channel count")
    sub.add_parser("train", parents=[common], help="train the small CNN with and without attention")
    sub.add_parser("masks", parents=[common], help="mask statistics of a saved model")
    v = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    v.add_argument("--list", action="store_true", help="print property names and exit")
    v.add_argument("--perturb-lambda", type=float, default=None,
                   help="multiply the probit constant by this factor (test hook)")
    return parser


def _setup_logging():
    level_name = os.environ.get("GPCA_LOG", "warn").lower()
    if level_name not in LOG_LEVELS:
        raise UsageError(f"GPCA_LOG must be one of {', '.join(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=LOG_LEVELS[level_name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.out is None and args.command != "verify":
        args.out = "gpca_out"
    try:
        _setup_logging()
        cfg = load_config(args.command, args.config)
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"gpca {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
