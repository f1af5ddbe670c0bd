"""Command line entry point: ``adafed run | compare | verify``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import verify as verify_mod
from .aggregation import AggregationError, AggregatorSpec
from .config import ConfigError, RunManifest, config_hash, config_to_dict, load_config, with_seed
from .data import PartitionError
from .federation import ExperimentResult, FederatedConfig, FederationError, ScheduleSpec, run
from .metrics import FairnessReport, fairness_report
from .models import ModelError

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

ROUNDS_HEADER = [
    "round", "global_lr", "direction_norm", "rho", "mean_loss", "mean_acc",
    "std_acc", "worst10", "best10", "angle", "kl", "dropped_count",
]
LAMBDA_HEADER = ["round", "client_id", "lambda"]
LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("adafed.cli")


def fmt(value) -> str:
    """17 significant digits for reals so CSV values parse back bit-exactly."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


NAN_REPORT = FairnessReport(*(math.nan for _ in FairnessReport.csv_header()))


def safe_report(accuracies: Sequence[float]) -> FairnessReport:
    """Fairness report, NaN where undefined (no accuracies, or all of them zero)."""
    if len(accuracies) == 0:
        return NAN_REPORT
    if not any(accuracies):
        rep = fairness_report([1.0] * len(accuracies))
        return dataclasses.replace(rep, mean_accuracy=0.0, worst_k_pct=0.0, best_k_pct=0.0,
                                   angle_degrees=math.nan, kl_to_uniform=math.nan)
    return fairness_report(accuracies)


def round_rows(result: ExperimentResult) -> list[list[str]]:
    rows = []
    for rec in result.records:
        accs = [rec.per_client_accuracy[k] for k in sorted(rec.per_client_accuracy)]
        rep = safe_report(accs)
        rows.append([
            fmt(rec.round), fmt(rec.global_lr), fmt(rec.direction_norm), fmt(rec.rho),
            fmt(np.mean(list(rec.per_client_loss.values()))),
            fmt(rep.mean_accuracy), fmt(rep.std_accuracy), fmt(rep.worst_k_pct), fmt(rep.best_k_pct),
            fmt(rep.angle_degrees), fmt(rep.kl_to_uniform), fmt(len(rec.dropped)),
        ])
    return rows


def lambda_rows(result: ExperimentResult) -> list[list[str]]:
    return [
        [fmt(rec.round), fmt(cid), fmt(lam)]
        for rec in result.records
        for cid, lam in sorted(rec.lambdas.items())
    ]


def write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path: str | Path) -> tuple[list[str], list[list[float]]]:
    """Parse one of our CSV files back into floats."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [[float(x) for x in row] for row in r]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def final_report(config: FederatedConfig, result: ExperimentResult) -> FairnessReport:
    if not config.model.is_classifier:
        return NAN_REPORT
    accs = result.records[-1].per_client_accuracy if result.records else result.initial_accuracy
    return safe_report([accs[k] for k in sorted(accs)])


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def run_to_dir(config: FederatedConfig, run_dir: Path, manifest: RunManifest) -> tuple[ExperimentResult, FairnessReport]:
    """Execute one experiment and write rounds.csv, lambda.csv and summary.json."""
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "checkpoints" if config.checkpoint_every else None
    result = run(config, checkpoint_dir=ckpt)
    write_csv(run_dir / "rounds.csv", ROUNDS_HEADER, round_rows(result))
    write_csv(run_dir / "lambda.csv", LAMBDA_HEADER, lambda_rows(result))
    report = final_report(config, result)
    manifest.finished = _now()
    last = result.records[-1].per_client_loss if result.records else result.initial_loss
    summary = {
        "fairness": report.to_dict(),
        "final_mean_loss": float(np.mean(list(last.values()))),
        "rounds": len(result.records),
        "aborted_rounds": sum(r.aborted for r in result.records),
        "config": config_to_dict(config),
        "manifest": dataclasses.asdict(manifest),
    }
    with open(run_dir / "summary.json", "w") as fh:
        json.dump(_json_safe(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result, report


def run_dir_name(digest: str, seed: int) -> str:
    return f"{digest[:16]}_seed{seed}"


def cmd_run(args) -> int:
    config = load_config(args.config)
    digest = config_hash(config)
    if args.seed is not None:
        config = with_seed(config, args.seed)
    run_dir = Path(args.out) / run_dir_name(digest, config.seed)
    manifest = RunManifest(digest, [config.seed], str(run_dir), started=_now())
    _, report = run_to_dir(config, run_dir, manifest)
    print(f"wrote {run_dir}")
    print("  " + "  ".join(f"{k}={v:.4g}" for k, v in report.to_dict().items()))
    return EXIT_OK


AGGREGATOR_KEYS = {"gamma", "weights", "schedule", "base"}


def parse_aggregator(entry: str, base: FederatedConfig) -> FederatedConfig:
    """``Kind[:key=value...]`` with keys gamma, weights, schedule and base.

    ``schedule`` and ``base`` override the server learning-rate schedule for
    this aggregator only, so methods can be compared at their own tuned rate.
    """
    kind, *opts = [p.strip() for p in entry.split(":")]
    agg = {"kind": kind}
    sched = {}
    for opt in opts:
        key, sep, value = opt.partition("=")
        key = key.strip()
        if not sep or key not in AGGREGATOR_KEYS:
            raise ConfigError(f"bad aggregator option {opt!r} in {entry!r}; keys are {sorted(AGGREGATOR_KEYS)}", key)
        try:
            if key == "gamma":
                agg["gamma"] = float(value)
            elif key == "weights":
                agg["fedavg_weights"] = value.strip()
            elif key == "schedule":
                sched["kind"] = value.strip()
            else:
                sched["base"] = float(value)
        except ValueError:
            raise ConfigError(f"bad value {value!r} in {entry!r}", key) from None
    try:
        aggregator = AggregatorSpec(**{**dataclasses.asdict(base.aggregator), **agg})
        schedule = ScheduleSpec(**{**dataclasses.asdict(base.schedule), **sched})
    except ValueError as exc:
        raise ConfigError(f"{exc} (in {entry!r})", "aggregators") from None
    return dataclasses.replace(base, aggregator=aggregator, schedule=schedule)


def _split_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def compare_rows(labels: list[str], reports: dict[str, list[FairnessReport]], seeds: list[int]) -> list[list[str]]:
    rows = []
    for label in labels:
        reps = reports[label]
        row = [label, ";".join(str(s) for s in seeds)]
        for name in FairnessReport.csv_header():
            values = np.array([getattr(r, name) for r in reps])
            row += [fmt(values.mean()), fmt(values.std())]
        rows.append(row)
    return rows


def compare_header() -> list[str]:
    out = ["aggregator", "seeds"]
    for name in FairnessReport.csv_header():
        out += [f"{name}_mean", f"{name}_std"]
    return out


def cmd_compare(args) -> int:
    base = load_config(args.config)
    labels = _split_list(args.aggregators)
    if len(labels) < 2:
        raise ConfigError("compare needs at least two aggregators", "aggregators")
    try:
        seeds = [int(s) for s in _split_list(args.seeds)]
    except ValueError:
        raise ConfigError(f"seeds must be a comma separated list of integers, got {args.seeds!r}", "seeds") from None
    if not seeds:
        raise ConfigError("no seeds given", "seeds")
    configs = {label: parse_aggregator(label, base) for label in labels}
    out = Path(args.out)
    reports: dict[str, list[FairnessReport]] = {}
    for label, cfg in configs.items():
        digest = config_hash(cfg)
        reports[label] = []
        for seed in seeds:
            run_dir = out / "runs" / run_dir_name(digest, seed)
            manifest = RunManifest(digest, [seed], str(run_dir), started=_now())
            _, rep = run_to_dir(with_seed(cfg, seed), run_dir, manifest)
            reports[label].append(rep)
            log.info("%s seed %d: mean %.4f std %.4f", label, seed, rep.mean_accuracy, rep.std_accuracy)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "compare.csv", compare_header(), compare_rows(labels, reports, seeds))
    print(f"wrote {out / 'compare.csv'}")
    for label in labels:
        acc = np.mean([r.mean_accuracy for r in reports[label]])
        std = np.mean([r.std_accuracy for r in reports[label]])
        print(f"  {label:<32} mean_acc={acc:.4f} std_acc={std:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = args.suite or list(verify_mod.SUITES)
    unknown = [n for n in names if n not in verify_mod.SUITES]
    if unknown:
        raise ConfigError(f"unknown suite(s) {unknown}; choose from {list(verify_mod.SUITES)}", "suite")
    ok = True
    for name in names:
        res = verify_mod.SUITES[name]()
        print(res.line(), flush=True)
        ok &= res.passed
    print("all suites passed" if ok else "some suites FAILED")
    return EXIT_OK if ok else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adafed", description="Fair federated learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several aggregators over several seeds")
    c.add_argument("--config", required=True)
    c.add_argument("--aggregators", required=True,
                   help='comma separated, e.g. "AdaFed:gamma=1:schedule=StepSizeBound:base=1,FedAvg"')
    c.add_argument("--seeds", required=True, help="comma separated integers")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="run the invariant suites")
    v.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    v.set_defaults(func=cmd_verify)
    return p


def _setup_logging() -> None:
    level_name = os.environ.get("ADAFED_LOG", "warning").strip().lower()
    if level_name not in LOG_LEVELS:
        raise ConfigError(f"ADAFED_LOG must be one of {sorted(LOG_LEVELS)}, got {level_name!r}", "ADAFED_LOG")
    logging.basicConfig(level=LOG_LEVELS[level_name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FederationError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (AggregationError, ModelError, PartitionError, FloatingPointError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
