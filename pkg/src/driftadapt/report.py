"""Run artifacts: predictions, event log, metrics and plot-ready CSVs."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pandas as pd

from .harness import MetricsReport, OnlineResult, recovery_times, regression_metrics, windowed_mae


class ReportError(OSError):
    pass


def to_jsonable(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def dumps(value) -> str:
    return json.dumps(to_jsonable(value), sort_keys=True, allow_nan=False)


def predictions_frame(result: OnlineResult, target_names: list[str] | None = None) -> pd.DataFrame:
    """One row per online step: t, predictions, labels (blank until released), released flag."""
    K = len(result.target_range)
    names = target_names or [f"y{k}" for k in range(K)]
    cols = ["t"] + [f"yhat_{n}" for n in names] + [f"y_{n}" for n in names] + ["released"]
    if not result.records:
        return pd.DataFrame(columns=cols)
    yhat = np.stack([r.yhat for r in result.records])
    y = np.stack([r.y if r.released else np.full(K, np.nan) for r in result.records])
    data = {"t": [r.t for r in result.records]}
    for k, n in enumerate(names):
        data[f"yhat_{n}"] = yhat[:, k]
    for k, n in enumerate(names):
        data[f"y_{n}"] = y[:, k]
    data["released"] = [int(r.released) for r in result.records]
    return pd.DataFrame(data, columns=cols)


def error_frame(result: OnlineResult) -> pd.DataFrame:
    """Per-step range-normalized absolute error and its windowed mean."""
    ts, wmae = windowed_mae(result)
    err = np.array([np.mean(np.abs(r.yhat - r.y) / result.target_range) if r.released else np.nan
                    for r in result.records])
    return pd.DataFrame({"t": ts.astype(int), "abs_error": err, "windowed_mae": wmae},
                        columns=["t", "abs_error", "windowed_mae"])


def delta_error_frame(result: OnlineResult, baseline: OnlineResult | None) -> pd.DataFrame:
    """Baseline windowed error minus this run's; positive values mean adaptation helped."""
    cols = ["t", "baseline_wmae", "wmae", "delta_error"]
    if baseline is None or not result.records:
        return pd.DataFrame(columns=cols)
    ts, w = windowed_mae(result)
    tb, wb = windowed_mae(baseline)
    if not np.array_equal(ts, tb):
        raise ValueError("baseline run covers different steps")
    return pd.DataFrame({"t": ts.astype(int), "baseline_wmae": wb, "wmae": w,
                         "delta_error": wb - w}, columns=cols)


def recovery_frames(result: OnlineResult, thresholds, horizon: int,
                    bin_width: int = 10) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-event recovery times and a per-level histogram (censored events counted apart)."""
    rec = recovery_times(result, thresholds, horizon)
    events = pd.DataFrame({"t": [r["t"] for r in rec], "level": [r["level"] for r in rec],
                           "recovery": pd.array([r["recovery"] for r in rec], dtype="Int64"),
                           "truncated": [int(r["truncated"]) for r in rec]},
                          columns=["t", "level", "recovery", "truncated"])
    edges = np.arange(0, horizon + bin_width, bin_width)
    rows = []
    for d in (1, 2, 3):
        times = [r["recovery"] for r in rec if r["level"] == d and r["recovery"] is not None]
        counts, _ = np.histogram(times, bins=edges)
        rows += [{"level": d, "bin_lo": int(lo), "bin_hi": int(hi), "count": int(c)}
                 for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
        rows.append({"level": d, "bin_lo": int(horizon) + 1, "bin_hi": -1,
                     "count": sum(r["level"] == d and r["recovery"] is None and not r["truncated"]
                                  for r in rec)})
    return events, pd.DataFrame(rows, columns=["level", "bin_lo", "bin_hi", "count"])


def _writable(out_dir: Path) -> Path:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise ReportError(f"cannot write report to {out_dir}: {exc.strerror or exc}") from exc
    return out_dir


def emit_report(result: OnlineResult, report: MetricsReport, out_dir: str | Path, *,
                thresholds=(0.1, 0.1, 0.1), horizon: int = 150,
                baseline: OnlineResult | None = None,
                target_names: list[str] | None = None) -> dict[str, Path]:
    """Write every artifact of a run into ``out_dir`` and return the paths by name.

    Wall-clock timings go to ``timings.jsonl`` so the other files are
    reproducible byte for byte under a fixed seed.

    Raises:
        ReportError: ``out_dir`` cannot be created or written.
    """
    out = _writable(Path(out_dir))
    paths = {name: out / name for name in (
        "predictions.csv", "events.jsonl", "metrics.json", "timings.jsonl", "error_over_time.csv",
        "delta_error.csv", "recovery_times.csv", "recovery_hist.csv")}
    try:
        predictions_frame(result, target_names).to_csv(paths["predictions.csv"], index=False)
        paths["events.jsonl"].write_text("".join(dumps(e) + "\n" for e in result.events),
                                         encoding="utf-8")
        paths["timings.jsonl"].write_text("".join(dumps(e) + "\n" for e in result.timings),
                                          encoding="utf-8")
        metrics = json.dumps(to_jsonable(report.to_dict()), sort_keys=True, indent=2,
                             allow_nan=False)
        paths["metrics.json"].write_text(metrics + "\n", encoding="utf-8")
        error_frame(result).to_csv(paths["error_over_time.csv"], index=False)
        delta_error_frame(result, baseline).to_csv(paths["delta_error.csv"], index=False)
        events, hist = recovery_frames(result, thresholds, horizon)
        events.to_csv(paths["recovery_times.csv"], index=False)
        hist.to_csv(paths["recovery_hist.csv"], index=False)
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc.strerror or exc}") from exc
    return paths


def metrics_from_predictions(path: str | Path, eps_reg: float = 1e-8,
                             mape_guard: float = 1e-6) -> MetricsReport:
    """Recompute the regression metrics from a predictions.csv (released rows only)."""
    frame = pd.read_csv(path)
    yhat_cols = [c for c in frame.columns if c.startswith("yhat_")]
    y_cols = ["y_" + c[len("yhat_"):] for c in yhat_cols]
    if not yhat_cols or any(c not in frame.columns for c in y_cols + ["released"]):
        raise ValueError(f"{path}: not a predictions file (need t, yhat_*, y_*, released)")
    rows = frame[frame["released"].astype(bool)]
    if rows.empty:
        return MetricsReport(n=0)
    return regression_metrics(rows[y_cols].to_numpy(float), rows[yhat_cols].to_numpy(float),
                              eps_reg, mape_guard)
