"""Command line entry points: run, synth, metrics."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from .config import ABLATIONS, ConfigError, RunConfig, apply_ablation, load_config
from .harness import compute_metrics, offline_train, run_online
from .ingest import IngestionError, Schema, prepare_stream, read_csv
from .report import ReportError, emit_report, metrics_from_predictions, to_jsonable
from .synth import SynthSpec, synth_stream

logger = logging.getLogger("driftadapt")


def _run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg = apply_ablation(cfg, args.ablation)
    raw = read_csv(args.data, Schema.load(args.schema))
    stream, _ = prepare_stream(raw, cfg.offline_size, cfg.latency)
    offline = offline_train(cfg, stream)
    baseline = None
    if not args.no_baseline and (cfg.use_drift or cfg.use_stable):
        baseline = run_online(apply_ablation(cfg, "static"), stream, copy.deepcopy(offline))
    result = run_online(cfg, stream, offline)
    report = compute_metrics(result, cfg)
    paths = emit_report(result, report, args.out, thresholds=cfg.recovery_mae,
                        horizon=cfg.recovery_horizon, baseline=baseline,
                        target_names=stream.target_names)
    logger.info("wrote %d files to %s", len(paths), args.out)
    summary = {"n": report.n, "nmse": report.nmse, "nmae": report.nmae,
               "drift_events": report.drift_events}
    print(json.dumps(to_jsonable(summary), sort_keys=True))
    return 0


def _synth(args: argparse.Namespace) -> int:
    spec = SynthSpec.load(args.spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    synth_stream(spec, args.seed).to_frame().to_csv(out, index=False)
    logger.info("wrote %d rows to %s (boundaries %s)", sum(s.length for s in spec.segments),
                out, spec.boundaries)
    return 0


def _metrics(args: argparse.Namespace) -> int:
    report = metrics_from_predictions(args.pred)
    print(json.dumps(to_jsonable(report.to_dict()), sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftadapt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="offline training followed by the online loop")
    run.add_argument("--config", help="flat key = value file (RunConfig fields)")
    run.add_argument("--data", required=True, help="CSV with feature and target columns")
    run.add_argument("--schema", required=True, help="JSON naming features, targets and mask")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int)
    run.add_argument("--ablation", choices=ABLATIONS, default="full")
    run.add_argument("--no-baseline", action="store_true",
                     help="skip the static run used for delta_error.csv")
    run.set_defaults(func=_run)

    synth = sub.add_parser("synth", help="generate a piecewise synthetic stream")
    synth.add_argument("--spec", required=True, help="JSON stream spec")
    synth.add_argument("--out", required=True, help="output CSV")
    synth.add_argument("--seed", type=int, default=0)
    synth.set_defaults(func=_synth)

    metrics = sub.add_parser("metrics", help="recompute metrics from predictions.csv")
    metrics.add_argument("--pred", required=True)
    metrics.set_defaults(func=_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, IngestionError, ReportError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
