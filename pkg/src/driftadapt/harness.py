"""Offline pretraining, the online detect/adapt/predict loop, and evaluation metrics."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .adapt import (EmptyAdaptationSet, Record, ReplayBuffer, build_adaptation_set, fine_tune,
                    level_recipe)
from .config import RunConfig
from .drift import DriftState, evaluate, promote_reference, should_detect
from .ingest import Stream
from .memory import MemoryQueue
from .predictor import AdamW, Batch, Predictor, set_trainable
from .stable import StableState, ema_update, stable_finetune, stable_trigger, window_error

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------- history
class PooledHistory:
    """Pooled backbone features per time step, written once when the step is predicted."""

    def __init__(self, n_steps: int, dim: int, window: int, agg_len: int):
        self.values = np.zeros((n_steps, dim))
        self.filled = np.zeros(n_steps, dtype=bool)
        self.span = window + agg_len - 1

    def slots(self, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """History block (B, S, dim) and validity mask (B, S) for steps ``ts``."""
        ts = np.atleast_1d(np.asarray(ts))
        idx = ts[:, None] + np.arange(-self.span, 0)[None, :]
        ok = idx >= 0
        safe = np.where(ok, idx, 0)
        valid = ok & self.filled[safe]
        hist = self.values[safe] * valid[..., None]
        return hist, valid.astype(float)


def memory_loop_settles(model: Predictor, probe: Batch, steps: int, tol: float) -> bool:
    """Free-run the memory feedback loop with the input window held fixed.

    Each step feeds the newest pooled features back into the history slots.
    The loop settles when the pooled-feature norm at the end is within
    ``1 + tol`` of its value halfway through; growth means the update made the
    loop expansive, which the online stream would amplify step after step.
    """
    hist, valid = probe.hist[0].copy(), probe.valid[0].copy()
    x = probe.x[:1]
    norms = np.empty(steps)
    for k in range(steps):
        pooled = model.forward(Batch(x, hist[None], valid[None]))[1]["pooled"][0]
        if not np.all(np.isfinite(pooled)):
            return False
        hist = np.vstack([hist[1:], pooled[None]])
        valid = np.append(valid[1:], 1.0)
        norms[k] = np.linalg.norm(pooled)
    return bool(norms[-1] <= (1.0 + tol) * norms[(steps - 1) // 2] + 1e-12)


def windows_of(X: np.ndarray, window: int) -> np.ndarray:
    """All length-``window`` slices as (N - window + 1, window, F); row i ends at i + window - 1."""
    return sliding_window_view(X, window, axis=0).transpose(0, 2, 1)


# ----------------------------------------------------------------- offline
@dataclass
class OfflineResult:
    model: Predictor
    drift: DriftState
    buffer: ReplayBuffer
    queue: MemoryQueue
    history: PooledHistory
    train_losses: list[float]
    val_losses: list[float]
    epochs_run: int


def _mse_grad(yhat: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    diff = yhat - y
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def offline_train(cfg: RunConfig, stream: Stream, seed: int | None = None) -> OfflineResult:
    """Fit the predictor on the first ``offline_size`` steps and build the online start state.

    Memory context during training comes from pooled features of the previous
    epoch (refreshed once per epoch); after training, one sequential pass
    recomputes them exactly as the online loop would.
    """
    seed = cfg.seed if seed is None else seed
    n, L = cfg.offline_size, cfg.window
    if len(stream) <= n + L:
        raise ValueError(f"stream of {len(stream)} steps is too short for an offline split of {n}")
    if n < L + 1:
        raise ValueError("offline split must hold more than one window")
    rng = np.random.default_rng(seed)
    model = Predictor.from_config(cfg, stream.n_features, stream.n_targets, seed=seed)
    wins = windows_of(stream.X, L)
    hist = PooledHistory(len(stream), model.pooled_dim, L, cfg.agg_len)

    ts_all = np.arange(L - 1, n)
    labeled = ts_all[[stream.has_label(t) for t in ts_all]]
    if len(labeled) < 2:
        raise ValueError("offline split needs at least two labeled windows")
    n_val = int(min(len(labeled) - 1, max(1, round(cfg.offline_val_split * len(labeled)))))
    tr_t, va_t = labeled[:-n_val], labeled[-n_val:]
    model.params["b_h"][:] = stream.Y[tr_t].mean(axis=0)
    opt = AdamW.from_config(cfg, model.params)

    def batch_for(ts: np.ndarray) -> Batch:
        h, v = hist.slots(ts)
        return Batch(wins[ts - L + 1], h, v, stream.Y[ts], ts)

    val_pos = np.searchsorted(ts_all, va_t)

    def refresh() -> float:
        """Recompute pooled features for the whole split; returns the validation MSE."""
        yhat, cache = model.forward(batch_for(ts_all))
        if model.use_memory:
            hist.values[ts_all] = cache["pooled"]
            hist.filled[ts_all] = True
        return _mse_grad(yhat[val_pos], stream.Y[va_t])[0]

    refresh()
    best_val = np.inf
    best_params = model.copy_params()
    stale, epochs = 0, 0
    train_losses: list[float] = []
    val_losses: list[float] = []
    for epoch in range(1, cfg.offline_epochs + 1):
        epochs = epoch
        order = rng.permutation(len(tr_t))
        train = batch_for(tr_t)
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            b = train.take(order[s:s + cfg.batch_size])
            yhat, cache = model.forward(b)
            loss, dy = _mse_grad(yhat, b.y)
            opt.step(model.params, model.backward(cache, dy))
            losses.append(loss * len(b))
        val = refresh()
        train_losses.append(float(np.sum(losses) / len(order)))
        val_losses.append(val)
        if val < best_val:
            best_val, stale = val, 0
            best_params = model.copy_params()
        else:
            stale += 1
            if stale >= cfg.offline_patience:
                break
    model.load_params(best_params)

    # exact causal pass with the final parameters
    hist.filled[:] = False
    for t in ts_all:
        pooled = model.forward(batch_for(np.array([t])))[1]["pooled"][0]
        hist.values[t] = pooled
        hist.filled[t] = True

    buffer = ReplayBuffer(cfg.n_buf)
    for t in labeled[-cfg.n_buf:]:
        h, v = hist.slots(np.array([t]))
        buffer.add(Record(int(t), wins[t - L + 1], h[0], v[0], stream.Y[t].copy()))
    queue = MemoryQueue(cfg.channels, cfg.queue_capacity, cfg.agg_len)
    for t in ts_all[-cfg.queue_capacity:]:
        queue.push(model.memory_item(hist.values[t]))
    drift = DriftState.from_config(cfg, model.project(stream.X[n - cfg.detect_window:n]))
    logger.info("offline training: %d epochs, best validation MSE %.5f", epochs, best_val)
    return OfflineResult(model, drift, buffer, queue, hist, train_losses, val_losses, epochs)


# ------------------------------------------------------------------ online
@dataclass
class StepRecord:
    t: int
    yhat: np.ndarray
    y: np.ndarray | None
    V: float | None = None
    raw_level: int | None = None
    level: int = 0
    events: tuple[str, ...] = ()
    e_t: float | None = None
    e_hat: float | None = None
    wall_ms: float = 0.0

    @property
    def released(self) -> bool:
        return self.y is not None


@dataclass
class OnlineResult:
    records: list[StepRecord]
    events: list[dict]
    timings: list[dict]
    drift: DriftState
    stable: StableState
    target_range: np.ndarray
    offline_size: int
    latency: int
    detect_window: int


def _finetune_event(t, trigger, level, aset, result) -> dict:
    return {"type": "finetune", "t": int(t), "trigger": trigger, "level": level,
            "set_composition": aset.composition(), "epochs_run": result.epochs_run,
            "final_train_loss": result.train_loss, "final_val_loss": result.val_loss,
            "restored_epoch": result.best_epoch, "rejected_candidates": result.rejected}


def run_online(cfg: RunConfig, stream: Stream, offline: OfflineResult,
               seed: int | None = None, target_range: np.ndarray | None = None) -> OnlineResult:
    """Stream the online split step by step.

    Per step: detect (and adapt before predicting), predict, push the memory
    item, ingest the label released at this step, update the error tracker and
    possibly calibrate the head, then record. ``target_range`` scales errors
    for the stable trigger (defaults to the offline target range).
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    model, drift, buffer, queue, hist = (offline.model, offline.drift, offline.buffer,
                                         offline.queue, offline.history)
    n, L, Lw, tau = cfg.offline_size, cfg.window, cfg.detect_window, cfg.latency
    if target_range is None:
        Yoff = stream.Y[:n]
        span = np.nanmax(Yoff, axis=0) - np.nanmin(Yoff, axis=0)
        target_range = np.where(span > 0, span, 1.0)
    stable = StableState.from_config(cfg)
    wins = windows_of(stream.X, L)
    preds: dict[int, np.ndarray] = {}
    records: list[StepRecord] = []
    events: list[dict] = []
    timings: list[dict] = []
    last_adapt = n  # error windows only count predictions made after the latest update
    end = len(stream) - 1

    for t in range(n, len(stream)):
        t0 = time.perf_counter()
        flags: list[str] = []
        V = raw = e_t = e_hat = None
        level = 0
        z_cur = model.project(stream.X[t - Lw + 1:t + 1])

        # (1) detection and drift-guided adaptation
        if cfg.use_drift and should_detect(t, drift, Lw):
            det = evaluate(t, drift, z_cur)
            V, raw, level = det.V, det.raw_level, det.effective_level
            if level >= 1:
                stable.reset_count()
                event = {"type": "drift", **det.as_event(), "adapted": False}
                try:
                    aset = build_adaptation_set(t, buffer, z_cur, project=model.project,
                                                sigma=drift.sigma, n_ft=cfg.n_ft, tau_h=cfg.tau_h,
                                                eps=cfg.perturb_eps, rng=rng, detect_window=Lw)
                except EmptyAdaptationSet:
                    events.append(event)
                    flags.append("drift_aborted")
                else:
                    f0 = time.perf_counter()
                    mask = set_trainable(level)
                    admissible = None
                    if model.use_memory and cfg.loop_check_steps and mask.trainable != {"head"}:
                        hp, vp = hist.slots(np.array([t]))
                        probe = Batch(wins[t - L + 1][None], hp, vp)
                        admissible = partial(memory_loop_settles, probe=probe,
                                             steps=cfg.loop_check_steps, tol=cfg.loop_growth_tol)
                    result = fine_tune(model, aset.batch(), level_recipe(cfg, level), mask,
                                       batch_size=cfg.batch_size, seq_len=cfg.seq_len,
                                       optim_cfg=cfg, rng=rng, admissible=admissible)
                    promote_reference(drift, model.project(stream.X[t - Lw + 1:t + 1]), t)
                    event["adapted"] = True
                    event["C_t"] = drift.count
                    events.append(event)
                    events.append(_finetune_event(t, "drift", level, aset, result))
                    timings.append({"t": t, "trigger": "drift",
                                    "wall_time_ms": (time.perf_counter() - f0) * 1000.0})
                    flags.append(f"drift_l{level}")
                    last_adapt = t

        # (2) predict
        h, v = hist.slots(np.array([t]))
        yhat, cache = model.forward(Batch(wins[t - L + 1][None], h, v))
        yhat = yhat[0]
        hist.values[t] = cache["pooled"][0]
        hist.filled[t] = True
        preds[t] = yhat
        stable.cache[t] = yhat

        # (3) memory item for the next steps
        queue.push(model.memory_item(hist.values[t]))

        # (4) label released at this step
        s = t - tau
        if s >= n and stream.has_label(s):
            hs, vs = hist.slots(np.array([s]))
            buffer.add(Record(s, wins[s - L + 1], hs[0], vs[0], stream.Y[s].copy()))
        ready = cfg.use_stable and s - Lw + 1 >= last_adapt
        if ready:
            idx = range(s - Lw + 1, s + 1)
            e_t = window_error(np.stack([stable.cache[i] for i in idx]) / target_range,
                               stream.Y[list(idx)] / target_range)
            if e_t is not None:
                stable.e_hat = e_hat = ema_update(stable.e_hat, e_t, stable.lam)
                if stable_trigger(level, stable.e_hat, stable):
                    events.append({"type": "stable", "t": t, "e_hat": stable.e_hat})
                    f0 = time.perf_counter()
                    out = stable_finetune(model, t, buffer, z_cur, cfg, stable, rng)
                    if out is not None:
                        result, aset = out
                        events.append(_finetune_event(t, "stable", "stable", aset, result))
                        timings.append({"t": t, "trigger": "stable",
                                        "wall_time_ms": (time.perf_counter() - f0) * 1000.0})
                        flags.append("stable")
                        last_adapt = t + 1

        for i in [i for i in stable.cache if i < s - Lw + 2]:
            del stable.cache[i]

        # (5) record; labels are attached if released by the end of the run
        y = stream.Y[t].copy() if t + tau <= end and stream.has_label(t) else None
        records.append(StepRecord(t, yhat, y, V, raw, level, tuple(flags), e_t, e_hat,
                                  (time.perf_counter() - t0) * 1000.0))

    return OnlineResult(records, events, timings, drift, stable, target_range, n, tau, Lw)


def run_pipeline(cfg: RunConfig, stream: Stream, seed: int | None = None) -> tuple[OfflineResult, OnlineResult]:
    offline = offline_train(cfg, stream, seed)
    return offline, run_online(cfg, stream, offline, seed)


# ----------------------------------------------------------------- metrics
@dataclass
class MetricsReport:
    n: int
    mse: list[float] = field(default_factory=list)
    mae: list[float] = field(default_factory=list)
    mape: list[float] = field(default_factory=list)
    r2: list[float] = field(default_factory=list)
    nmse: float = float("nan")
    nmae: float = float("nan")
    mape_mean: float = float("nan")
    r2_mean: float = float("nan")
    drift_events: dict = field(default_factory=dict)
    recovery: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def regression_metrics(y: np.ndarray, yhat: np.ndarray, eps_reg: float = 1e-8,
                       mape_guard: float = 1e-6) -> MetricsReport:
    """Per-target MSE, MAE, MAPE (%), R² and the variance-normalized aggregates."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.ndim == 1:
        y, yhat = y[:, None], yhat[:, None]
    if len(y) == 0:
        return MetricsReport(n=0)
    err = yhat - y
    mse = np.mean(err ** 2, axis=0)
    mae = np.mean(np.abs(err), axis=0)
    delta = mape_guard * np.max(np.abs(y), axis=0)
    mape = 100.0 * np.mean(np.abs(err) / np.maximum(np.abs(y), np.maximum(delta, 1e-300)), axis=0)
    sst = np.sum((y - y.mean(axis=0)) ** 2, axis=0)
    sse = np.sum(err ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(sst > 0, 1.0 - sse / sst, np.nan)
    sigma = y.std(axis=0)
    if np.any(sigma == 0):
        warnings.warn("zero-variance target: its normalized error is dominated by eps_reg",
                      RuntimeWarning)
    nmse = float(np.mean(mse / (sigma ** 2 + eps_reg)))
    nmae = float(np.mean(mae / (sigma + eps_reg)))
    return MetricsReport(n=len(y), mse=mse.tolist(), mae=mae.tolist(), mape=mape.tolist(),
                         r2=r2.tolist(), nmse=nmse, nmae=nmae, mape_mean=float(np.mean(mape)),
                         r2_mean=float(np.nanmean(r2)) if np.any(sst > 0) else float("nan"))


def windowed_mae(result: OnlineResult) -> tuple[np.ndarray, np.ndarray]:
    """Range-normalized MAE over the last ``detect_window`` predictions, per step (hindsight)."""
    ts = np.array([r.t for r in result.records])
    err = np.full(len(ts), np.nan)
    for i, r in enumerate(result.records):
        if r.y is not None:
            err[i] = float(np.mean(np.abs(r.yhat - r.y) / result.target_range))
    w = result.detect_window
    out = np.full(len(ts), np.nan)
    if len(ts) >= w:
        out[w - 1:] = sliding_window_view(err, w).mean(axis=1)
    return ts, out


def recovery_times(result: OnlineResult, thresholds: tuple[float, float, float],
                   horizon: int) -> list[dict]:
    """Steps from each completed drift adaptation until the windowed MAE falls below its level's threshold.

    ``recovery`` is ``None`` when the threshold is not reached; ``truncated``
    marks those events whose horizon runs past the last labeled window, so
    they are unobserved rather than censored.
    """
    ts, wmae = windowed_mae(result)
    pos = {int(t): i for i, t in enumerate(ts)}
    observed = ts[np.isfinite(wmae)]
    last_obs = int(observed[-1]) if len(observed) else -1
    out = []
    for ev in result.events:
        if ev["type"] != "drift" or not ev["adapted"]:
            continue
        t_e, d = ev["t"], ev["effective_level"]
        thr = thresholds[d - 1]
        rec = None
        for k in range(t_e + result.detect_window - 1, t_e + horizon + 1):
            i = pos.get(k)
            if i is None:
                break
            if wmae[i] < thr:
                rec = k - t_e
                break
        out.append({"t": t_e, "level": d, "recovery": rec,
                    "truncated": rec is None and t_e + horizon > last_obs})
    return out


def compute_metrics(result: OnlineResult, cfg: RunConfig) -> MetricsReport:
    rows = [r for r in result.records if r.released]
    if rows:
        report = regression_metrics(np.stack([r.y for r in rows]), np.stack([r.yhat for r in rows]),
                                    cfg.eps_reg, cfg.mape_guard)
    else:
        report = MetricsReport(n=0)
    drifts = [e for e in result.events if e["type"] == "drift"]
    report.drift_events = {
        "detections": len(drifts),
        "adapted": sum(e["adapted"] for e in drifts),
        "by_level": {str(d): sum(e["effective_level"] == d and e["adapted"] for e in drifts)
                     for d in (1, 2, 3)},
        "stable_triggers": sum(e["type"] == "stable" for e in result.events),
        "final_C_t": result.drift.count,
    }
    rec = recovery_times(result, cfg.recovery_mae, cfg.recovery_horizon)
    report.recovery = {
        str(d): {"times": [r["recovery"] for r in rec if r["level"] == d and r["recovery"] is not None],
                 "censored": sum(r["level"] == d and r["recovery"] is None and not r["truncated"]
                                 for r in rec),
                 "truncated": sum(r["level"] == d and r["truncated"] for r in rec)}
        for d in (1, 2, 3)
    }
    return report
