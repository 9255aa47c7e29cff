"""Command-line driver: ``fedtrigger simulate | sweep | inspect``.

Exit codes: 0 success, 2 usage or config error, 3 runtime or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analysis import (
    EmptyPopulationError,
    bucket_by_hour,
    compare_populations,
    eval_threshold_table,
    format_hourly_table,
    format_skew_table,
    format_threshold_table,
    format_weight_csv,
    format_weight_report,
    inspect_weights,
    snapshot_fleet,
)
from .config import ConfigError, ExperimentConfig, load_config
from .device import TaskKind
from .features import FeatureSchema, SchemaError, default_schema
from .fleet import InteractionGenerator, _n_categories, build_fleet
from .model import CheckpointError, format_checkpoint, read_checkpoint
from .orchestrator import RoundState, format_round_log
from .simulation import Simulation

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def simulation_outputs(sim: Simulation, cfg: ExperimentConfig) -> dict[str, str]:
    """Every file ``simulate`` writes, keyed by file name."""
    history = sim.server.history
    tz = cfg.display_tz_offset
    committed = [r for r in history if r.state == RoundState.COMMITTED]
    train = [r for r in committed if r.kind == TaskKind.TRAIN]
    evals = [r for r in committed if r.kind == TaskKind.EVAL]

    files = {
        "round_log.csv": format_round_log(history),
        # mean = examples per committed round, weight = committed rounds in that hour
        "hourly_train_rounds.csv": format_hourly_table(bucket_by_hour(
            ((r.closed_at, r.aggregate_metrics.get("example_count", 0), 1.0) for r in train), tz)),
        "hourly_eval_loss.csv": format_hourly_table(bucket_by_hour(
            ((r.closed_at, r.aggregate_metrics["mean_loss"], r.aggregate_metrics["example_count"])
             for r in evals if r.aggregate_metrics.get("example_count")), tz)),
        "model.ckpt": format_checkpoint(sim.params, sim.schema),
        "feature_stats.csv": _csv(("feature_id", "feature_name", "count"),
                                  [(i, n, int(c)) for i, (n, c) in
                                   enumerate(zip(sim.schema.feature_names(), sim.server.feature_counts))]),
    }
    taus = sim.config.server.taus
    if taus:
        rows = []
        for r in evals:
            if "threshold_counts" not in r.aggregate_metrics:
                continue
            for m in eval_threshold_table(r.aggregate_metrics, taus):
                rows.append((r.round_id, r.closed_at, repr(m.tau), _f(m.delta_ctr),
                             _f(m.retained_impressions), _f(m.retained_clicks)))
        files["eval_thresholds.csv"] = _csv(
            ("round_id", "sim_time", "tau", "delta_ctr", "retained_impressions", "retained_clicks"), rows)
    return files


def _f(x) -> str:
    return "" if x is None or np.isnan(x) else repr(float(x))


def cmd_simulate(args) -> int:
    cfg = _load(args)
    sim = Simulation(cfg.simulation_config())
    sim.run_days(cfg.horizon_days)
    out = Path(cfg.output_dir)
    for name, text in simulation_outputs(sim, cfg).items():
        _write(out, name, text)
    train = sim.committed(TaskKind.TRAIN)
    attempted = sum(1 for r in sim.server.history if r.kind == TaskKind.TRAIN)
    print(f"simulated {cfg.horizon_days:g} days on {len(sim.devices)} eligible devices: "
          f"{len(train)}/{attempted} training rounds committed, model version {sim.params.round_version}")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    params = read_checkpoint(args.checkpoint, cfg.schema)
    n_cat = _n_categories(cfg.schema)
    gen = InteractionGenerator(cfg.schema, cfg.resolved_ground_truth(), n_cat,
                               cfg.fleet.score_range, cfg.fleet.activity)
    profiles = build_fleet(cfg.fleet, cfg.master_seed, n_cat)
    snap = snapshot_fleet(profiles, gen, cfg.sweep_days, cfg.master_seed)
    t = cfg.taus
    try:
        report = compare_populations(params, snap, cfg.training_policy, cfg.deployment_policy,
                                     t.values, t.count, t.low_quantile, t.high_quantile)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(cfg.output_dir)
    _write(out, "thresholds_training.csv", format_threshold_table(report.training))
    _write(out, "thresholds_deployment.csv", format_threshold_table(report.deployment))
    _write(out, "skew.csv", format_skew_table(report))
    sys.stdout.write(format_skew_table(report))
    return EXIT_OK


def read_feature_stats(path, schema: FeatureSchema) -> np.ndarray:
    counts = np.zeros(schema.total_dimension, dtype=np.int64)
    names = schema.feature_names()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"feature_id", "count"} <= set(reader.fieldnames):
            raise UsageError(f"{path}: expected columns feature_id,feature_name,count")
        for lineno, row in enumerate(reader, start=2):
            try:
                i, c = int(row["feature_id"]), int(row["count"])
            except (TypeError, ValueError):
                raise UsageError(f"{path}:{lineno}: bad row") from None
            if not 0 <= i < len(names):
                raise UsageError(f"{path}:{lineno}: feature_id {i} outside schema")
            if row.get("feature_name") not in (None, names[i]):
                raise UsageError(f"{path}:{lineno}: feature {i} is {names[i]!r}, file says {row['feature_name']!r}")
            counts[i] = c
    return counts


def cmd_inspect(args) -> int:
    cfg = _load(args) if args.config else None
    schema = cfg.schema if cfg else default_schema()
    params = read_checkpoint(args.checkpoint, schema)
    counts = read_feature_stats(args.stats, schema) if args.stats else None
    report = inspect_weights(params, schema, counts)
    sys.stdout.write(format_weight_report(report))
    out = Path(args.out if args.out else (cfg.output_dir if cfg else "."))
    _write(out, "weight_report.csv", format_weight_csv(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedtrigger", description="Federated triggering-model experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment YAML file")
        sp.add_argument("--seed", type=int, help="override master_seed")
        sp.add_argument("--out", help="output directory (overrides output_dir)")

    s = sub.add_parser("simulate", help="run the fleet simulation and write round logs, hourly tables, checkpoint")
    common(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="threshold tables for training vs deployment populations")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("inspect", help="weight report for a checkpoint")
    common(s, config_required=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--stats", help="feature_stats.csv from simulate")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, SchemaError, CheckpointError, EmptyPopulationError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error by contract
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
