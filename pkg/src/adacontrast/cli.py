"""Command-line harness: source training, adaptation runs, ablations,
hyperparameter sweeps, and report aggregation.

Results land under ``$ADACONTRAST_RESULTS`` (default ``./runs``) as
``<root>/<name>/<seed>/`` with a manifest, the resolved config, streaming
metrics.csv, summary.json, and calibration.csv. Exit codes: 0 success,
2 usage/configuration error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import METRIC_COLUMNS, DivergenceError, adapt_offline, adapt_online, train_source
from .bench import (
    SWEEP_AXES,
    config_digest,
    evaluate_params,
    run_ablation_ladder,
    run_sweep,
)
from .config import ConfigError, RunConfig, load_config
from .metrics import accuracy
from .network import load_checkpoint, save_checkpoint
from .tasks import ShiftTask

RESULTS_ENV = "ADACONTRAST_RESULTS"


def _float_text(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def results_root(override: str | None) -> Path:
    if override:
        return Path(override)
    return Path(os.environ.get(RESULTS_ENV, "runs"))


def run_dir(root: Path, config: RunConfig) -> Path:
    out = root / config.name / str(config.seed)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, config_path: str, config: RunConfig) -> None:
    manifest = {
        "command": command,
        "config_path": str(config_path),
        "seed": config.seed,
        "version": __version__,
        "output_dir": str(out),
        "config_digest": config_digest(config.adapt_config()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out / "config").write_text(config.dump())


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_float_text(row[col]) for col in columns])


def write_summary(out: Path, payload: dict) -> None:
    (out / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_calibration(out: Path, report) -> None:
    write_csv(out / "calibration.csv",
              ("bin_lo", "bin_hi", "mean_conf", "acc", "count"), report.rows())


def _evaluate_and_write(out: Path, params, task: ShiftTask, extra: dict) -> dict:
    summary = evaluate_params(params, task.target_x, task.target_y)
    report = summary.pop("calibration")
    write_calibration(out, report)
    summary.update(extra)
    write_summary(out, summary)
    return summary


def cmd_train_source(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    out = run_dir(results_root(args.results_root), config)
    write_manifest(out, "train-source", args.config, config)
    task = config.build_task()
    result = train_source(config.adapt_config(), config.build_arch(task),
                          task.source_x, task.source_y)
    checkpoint = out / "checkpoint.json"
    save_checkpoint(checkpoint, result.params, seed=config.seed,
                    extra={"classes": sorted(set(int(c) for c in task.source_y)),
                           "val_accuracy": result.val_accuracy,
                           "task": config["task"]})
    write_csv(out / "source_metrics.csv", ("step", "epoch", "loss", "lr"),
              result.train_rows)
    write_summary(out, {"mode": "train_source", "task": task.name,
                        "seed": config.seed,
                        "val_accuracy": result.val_accuracy,
                        "checkpoint": str(checkpoint)})
    print(f"checkpoint written to {checkpoint} (val accuracy {result.val_accuracy:.4f})")
    return 0


def _load_source(out: Path, args):
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.json"
    if not checkpoint.exists():
        raise FileNotFoundError(
            f"source checkpoint not found at {checkpoint}; run train-source first "
            f"or pass --checkpoint")
    params, meta = load_checkpoint(checkpoint)
    return params, meta, checkpoint


def cmd_adapt(args, online: bool) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    out = run_dir(results_root(args.results_root), config)
    mode = "online" if online else "offline"
    write_manifest(out, f"adapt:{mode}", args.config, config)
    task = config.build_task()
    source_params, _, checkpoint = _load_source(out, args)

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

        def on_step(row):
            writer.writerow([_float_text(row[col]) for col in METRIC_COLUMNS])
            fh.flush()  # interrupted runs keep a valid partial log

        runner = adapt_online if online else adapt_offline
        try:
            result = runner(config.adapt_config(), source_params,
                            task.target_x, task.target_y, on_step=on_step)
        except DivergenceError as err:
            (out / "divergence.json").write_text(
                json.dumps({"error": str(err), "state": err.state}, indent=2) + "\n")
            print(f"error: run diverged: {err}", file=sys.stderr)
            return 3

    adapted_path = out / "adapted_checkpoint.json"
    source_ref = os.path.relpath(checkpoint, out)
    save_checkpoint(adapted_path, result.params, seed=config.seed,
                    extra={"mode": mode, "source_checkpoint": source_ref})
    extra = {"mode": mode, "task": task.name, "seed": config.seed,
             "total_steps": result.total_steps,
             "dropped_batches": result.dropped_batches,
             "pseudo_label_acc_per_epoch": [e["pseudo_label_acc"] for e in result.per_epoch],
             "adapted_checkpoint": str(adapted_path)}
    if online:
        extra["stream_accuracy"] = accuracy(result.stream_preds, task.target_y)
    summary = _evaluate_and_write(out, result.params, task, extra)
    print(f"{mode} adaptation done: accuracy {summary['accuracy']:.4f} "
          f"(per-class {summary['per_class_accuracy']:.4f}, ECE {summary['ece']:.4f})")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    out = run_dir(results_root(args.results_root), config)
    write_manifest(out, "ablate", args.config, config)
    task = config.build_task()
    rows = run_ablation_ladder(task, config.adapt_config(),
                               arch=config.build_arch(task))
    table = [{"row": r.row_id, "components": "+".join(sorted(r.components)),
              "accuracy": r.accuracy, "per_class_accuracy": r.per_class_accuracy,
              "config_digest": r.config_digest} for r in rows]
    write_csv(out / "ablation.csv",
              ("row", "components", "accuracy", "per_class_accuracy", "config_digest"),
              table)
    write_summary(out, {"mode": "ablate", "task": task.name, "seed": config.seed,
                        "rows": table})
    for entry in table:
        print(f"row {entry['row']:>2}: acc={entry['accuracy']:.4f} "
              f"({entry['components']})")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    if args.axis not in SWEEP_AXES:
        print(f"error: unknown sweep axis {args.axis!r}; choose from {SWEEP_AXES}",
              file=sys.stderr)
        return 2
    out = run_dir(results_root(args.results_root), config)
    write_manifest(out, f"sweep:{args.axis}", args.config, config)
    task = config.build_task()
    values = None
    if args.values:
        caster = float if args.axis == "lr" else int
        values = [caster(part) for part in args.values.split(",")]
    rows = run_sweep(task, config.adapt_config(), args.axis, values=values,
                     arch=config.build_arch(task))
    write_csv(out / f"sweep_{args.axis}.csv",
              ("task", "axis", "value", "seed", "accuracy", "per_class_accuracy",
               "ece", "mce", "diverged"), rows)
    write_summary(out, {"mode": f"sweep:{args.axis}", "task": task.name,
                        "seed": config.seed, "rows": rows})
    for row in rows:
        flag = " DIVERGED" if row["diverged"] else ""
        print(f"{args.axis}={row['value']}: acc={row['accuracy']:.4f}{flag}")
    return 0


def cmd_report(args) -> int:
    root = Path(args.results_dir)
    summaries = sorted(root.glob("*/*/summary.json"))
    if not summaries:
        print(f"error: no completed runs under {root}", file=sys.stderr)
        return 2
    rows = []
    for path in summaries:
        data = json.loads(path.read_text())
        rows.append({
            "task": data.get("task", ""),
            "method": data.get("method", data.get("mode", "")),
            "seed": data.get("seed", ""),
            "accuracy": data.get("accuracy", float("nan")),
            "per_class_accuracy": data.get("per_class_accuracy", float("nan")),
            "ece": data.get("ece", float("nan")),
            "mce": data.get("mce", float("nan")),
            "run": str(path.parent.relative_to(root)),
        })
    rows.sort(key=lambda r: (str(r["task"]), str(r["method"]), str(r["seed"])))
    columns = ("task", "method", "seed", "accuracy", "per_class_accuracy",
               "ece", "mce", "run")
    write_csv(root / "report.csv", columns, rows)
    header = f"{'task':<28} {'method':<22} {'seed':>4} {'acc':>7} {'avg':>7} {'ece':>7}"
    print(header)
    print("-" * len(header))
    for row in rows:
        cells = []
        for key in ("accuracy", "per_class_accuracy", "ece"):
            value = row[key]
            cells.append(f"{value:>7.4f}" if isinstance(value, float)
                         and not np.isnan(value) else f"{'-':>7}")
        print(f"{row['task']:<28} {row['method']:<22} {row['seed']:>4} "
              + " ".join(cells))
    print(f"\nreport written to {root / 'report.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adacontrast",
        description="Contrastive test-time adaptation benchmark harness")
    parser.add_argument("--results-root", default=None,
                        help=f"results directory (default ${RESULTS_ENV} or ./runs)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_args(p):
        p.add_argument("config", help="path to a run config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("train-source", help="train and checkpoint a source model")
    add_run_args(p)

    p = sub.add_parser("adapt", help="offline multi-epoch adaptation")
    add_run_args(p)
    p.add_argument("--online", action="store_true",
                   help="single-pass streaming adaptation")
    p.add_argument("--checkpoint", default=None,
                   help="source checkpoint (default: <run dir>/checkpoint.json)")

    p = sub.add_parser("adapt-online", help="single-pass streaming adaptation")
    add_run_args(p)
    p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("ablate", help="run the component ablation ladder")
    add_run_args(p)

    p = sub.add_parser("sweep", help="vary one hyperparameter axis")
    add_run_args(p)
    p.add_argument("--axis", required=True,
                   help=f"one of {', '.join(SWEEP_AXES)}")
    p.add_argument("--values", default=None,
                   help="comma-separated grid (default: built-in grid)")

    p = sub.add_parser("report", help="aggregate summaries under a results dir")
    p.add_argument("results_dir")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train-source":
            return cmd_train_source(args)
        if args.command == "adapt":
            return cmd_adapt(args, online=args.online)
        if args.command == "adapt-online":
            return cmd_adapt(args, online=True)
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "report":
            return cmd_report(args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
