"""Severity-guided fine-tuning: trend-aware loss, replay retrieval, set building, training."""

from __future__ import annotations

import logging
import time
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .drift import mmd2_many
from .predictor import AdamW, Batch, FreezeMask, GROUP_OF, Predictor, lr_multipliers

logger = logging.getLogger(__name__)

SOURCES = ("current_labeled", "similar_history", "resampled", "perturbed")
RESAMPLERS = ("linear_interp", "pooling", "antialias_conv")


class EmptyAdaptationSet(RuntimeError):
    """No labeled sample is available, so a supervised update is impossible."""


# --------------------------------------------------------------------- losses
def _as_seq(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


# The helpers below take (..., H, K) blocks with time on axis -2 and return the
# per-block loss (shape ...) plus the gradient with respect to yh.
def _trend(yh, y):
    H, K = y.shape[-2:]
    if H < 2:
        return np.zeros(y.shape[:-2]), np.zeros_like(yh)
    r = np.diff(yh, axis=-2) - np.diff(y, axis=-2)
    c = 1.0 / (K * (H - 1))
    g = np.zeros_like(yh)
    g[..., 1:, :] += r
    g[..., :-1, :] -= r
    return c * np.sum(r * r, axis=(-2, -1)), 2.0 * c * g


def _second_diff(yh, y):
    H, K = y.shape[-2:]
    if H < 3:
        return np.zeros(y.shape[:-2]), np.zeros_like(yh)
    r = np.diff(yh, n=2, axis=-2) - np.diff(y, n=2, axis=-2)
    c = 1.0 / (K * (H - 2))
    g = np.zeros_like(yh)
    g[..., 2:, :] += r
    g[..., 1:-1, :] -= 2.0 * r
    g[..., :-2, :] += r
    return c * np.sum(r * r, axis=(-2, -1)), 2.0 * c * g


def _vol(yh, y):
    H, K = y.shape[-2:]
    centred = yh - yh.mean(axis=-2, keepdims=True)
    gap = np.mean(centred ** 2, axis=-2) - y.var(axis=-2)
    g = (2.0 / K) * gap[..., None, :] * 2.0 * centred / H
    return np.sum(gap * gap, axis=-1) / K, g


def trend_loss(yhat_seq, y_seq) -> float:
    yh, y = _as_seq(yhat_seq), _as_seq(y_seq)
    if len(y) < 2:
        warnings.warn("trend term needs at least 2 steps; returning 0", RuntimeWarning)
    return float(_trend(yh, y)[0])


def diff_loss(yhat_seq, y_seq) -> float:
    yh, y = _as_seq(yhat_seq), _as_seq(y_seq)
    if len(y) < 3:
        warnings.warn("difference term needs at least 3 steps; returning 0", RuntimeWarning)
    return float(_second_diff(yh, y)[0])


def vol_loss(yhat_seq, y_seq) -> float:
    return float(_vol(_as_seq(yhat_seq), _as_seq(y_seq))[0])


def joint_loss(yhat_seq, y_seq, weights: tuple[float, float, float]) -> float:
    yh, y = _as_seq(yhat_seq), _as_seq(y_seq)
    w_tr, w_df, w_vl = weights
    err = float(np.mean((yh - y) ** 2))
    return err + w_tr * trend_loss(yh, y) + w_df * diff_loss(yh, y) + w_vl * vol_loss(yh, y)


def joint_loss_grad(yhat: np.ndarray, y: np.ndarray, weights: tuple[float, float, float],
                    seq_len: int) -> tuple[float, np.ndarray]:
    """Loss and d/dyhat over a batch split into consecutive sequences of ``seq_len`` rows.

    The squared-error term covers every row; the trend, difference and
    volatility terms are averaged over the sequences.
    """
    B = len(y)
    diff = yhat - y
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    w_tr, w_df, w_vl = weights
    if w_tr == w_df == w_vl == 0:
        return loss, grad
    n_full, tail = divmod(B, seq_len)
    n_seq = n_full + (tail > 0)
    blocks = []
    if n_full:
        cut = n_full * seq_len
        shape = (n_full, seq_len, y.shape[1])
        blocks.append((slice(0, cut), yhat[:cut].reshape(shape), y[:cut].reshape(shape)))
    if tail:
        blocks.append((slice(B - tail, B), yhat[B - tail:], y[B - tail:]))
    for sl, yh_s, y_s in blocks:
        for w, fn in ((w_tr, _trend), (w_df, _second_diff), (w_vl, _vol)):
            if w:
                val, g = fn(yh_s, y_s)
                loss += w * float(np.sum(val)) / n_seq
                grad[sl] += (w / n_seq) * g.reshape(-1, y.shape[1])
    return loss, grad


# --------------------------------------------------------------- replay buffer
@dataclass(frozen=True)
class Record:
    """A labeled training example: the feature window plus its memory history."""

    t: int
    x: np.ndarray
    hist: np.ndarray
    valid: np.ndarray
    y: np.ndarray


class ReplayBuffer:
    """Bounded FIFO of labeled records, separate from the memory queue."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._records: deque[Record] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def add(self, record: Record) -> None:
        self._records.append(record)

    @property
    def records(self) -> list[Record]:
        return list(self._records)

    def times(self) -> list[int]:
        return [r.t for r in self._records]

    def latest_rows(self) -> np.ndarray:
        """Current-step feature rows of every record, oldest first."""
        if not self._records:
            return np.zeros((0, 0))
        return np.stack([r.x[-1] for r in self._records])


def retrieve_similar(buffer: ReplayBuffer, z_cur: np.ndarray, tau_h: float,
                     project, sigma: float) -> list[tuple[float, list[Record]]]:
    """Windows of consecutive buffer records whose MMD to ``z_cur`` is below ``tau_h``.

    Records are re-projected with ``project`` so scores live in the current
    feature space. Results are sorted by score, lowest first.
    """
    n = len(z_cur)
    records = buffer.records
    if len(records) < n:
        return []
    z_buf = project(np.stack([r.x[-1] for r in records]))
    cands = sliding_window_view(z_buf, n, axis=0).transpose(0, 2, 1)
    scores = mmd2_many(cands, z_cur, sigma)
    keep = np.flatnonzero(scores < tau_h)
    order = keep[np.argsort(scores[keep], kind="stable")]
    return [(float(scores[i]), records[i:i + n]) for i in order]


# --------------------------------------------------------------- augmentation
def resample_variant(series: np.ndarray, operator: str) -> np.ndarray:
    """Scale variant along axis 0 (time); same length as the input.

    ``linear_interp`` upsamples by midpoints and keeps the odd phase,
    ``pooling`` is a width-2 running mean with the first value repeated,
    ``antialias_conv`` smooths with [0.25, 0.5, 0.25] and edge replication.
    """
    x = np.asarray(series, dtype=float)
    if operator not in RESAMPLERS:
        raise ValueError(f"unknown resampling operator {operator!r}")
    if len(x) < 2:
        warnings.warn("series shorter than 2 steps is returned unchanged", RuntimeWarning)
        return x.copy()
    if operator == "linear_interp":
        mid = 0.5 * (x[:-1] + x[1:])
        return np.concatenate([mid, x[-1:]], axis=0)
    if operator == "pooling":
        padded = np.concatenate([x[:1], x], axis=0)
        return 0.5 * (padded[:-1] + padded[1:])
    padded = np.concatenate([x[:1], x, x[-1:]], axis=0)
    return 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]


def feature_variance(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=float)
    if len(rows) < 2:
        warnings.warn("fewer than 2 samples for the perturbation covariance; using identity",
                      RuntimeWarning)
        return np.ones(rows.shape[-1])
    return rows.var(axis=0, ddof=1)


def perturb(z: np.ndarray, eps: float, sigma_diag: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    xi = rng.standard_normal(z.shape) * np.sqrt(np.asarray(sigma_diag, float))
    return z + eps * xi


# ------------------------------------------------------------- adaptation set
@dataclass
class AdaptationSet:
    x: list[np.ndarray] = field(default_factory=list)
    hist: list[np.ndarray] = field(default_factory=list)
    valid: list[np.ndarray] = field(default_factory=list)
    y: list[np.ndarray] = field(default_factory=list)
    t: list[int] = field(default_factory=list)
    source: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.source)

    def append(self, rec: Record, source: str, x: np.ndarray | None = None) -> None:
        self.x.append(rec.x if x is None else x)
        self.hist.append(rec.hist)
        self.valid.append(rec.valid)
        self.y.append(rec.y)
        self.t.append(rec.t)
        self.source.append(source)

    def composition(self) -> dict[str, int]:
        return {s: self.source.count(s) for s in SOURCES}

    def batch(self) -> Batch:
        return Batch(np.stack(self.x), np.stack(self.hist), np.stack(self.valid),
                     np.stack(self.y), np.array(self.t))


def build_adaptation_set(now: int, buffer: ReplayBuffer, z_cur: np.ndarray, *, project,
                         sigma: float, n_ft: int, tau_h: float, eps: float,
                         rng: np.random.Generator, detect_window: int | None = None) -> AdaptationSet:
    """Fill an adaptation set in priority order until it holds ``n_ft`` samples.

    Order: labeled samples of the current detection window, similar history,
    resampled variants, then perturbed variants; the two synthetic passes
    repeat with fresh randomness until the target size is met.
    """
    lw = len(z_cur) if detect_window is None else detect_window
    aset = AdaptationSet()
    base: list[Record] = []
    seen: set[int] = set()
    for rec in buffer:
        if now - lw < rec.t <= now:
            base.append(rec)
            seen.add(rec.t)
            aset.append(rec, "current_labeled")
            if len(aset) >= n_ft:
                return aset
    for _, window in retrieve_similar(buffer, z_cur, tau_h, project, sigma):
        for rec in window:
            if rec.t in seen:
                continue
            seen.add(rec.t)
            base.append(rec)
            aset.append(rec, "similar_history")
            if len(aset) >= n_ft:
                return aset
    if not base:
        raise EmptyAdaptationSet(f"no labeled samples available at t={now}")
    sigma_diag = feature_variance(np.stack([r.x[-1] for r in base]))
    while len(aset) < n_ft:
        for rec in base:
            op = RESAMPLERS[rng.integers(len(RESAMPLERS))]
            aset.append(rec, "resampled", resample_variant(rec.x, op))
            if len(aset) >= n_ft:
                return aset
        for rec in base:
            aset.append(rec, "perturbed", perturb(rec.x, eps, sigma_diag, rng))
            if len(aset) >= n_ft:
                return aset
    return aset


# ----------------------------------------------------------------- fine-tuning
@dataclass(frozen=True)
class Recipe:
    lr: float
    max_epochs: int
    patience: int
    val_split: float
    lower_lr_multiplier: float
    l2sp_coeff: float
    weights: tuple[float, float, float]
    min_steps: int = 0


def level_recipe(cfg, level: int) -> Recipe:
    lc = cfg.level(level)
    weights = lc.loss_weights if cfg.use_trend_terms else (0.0, 0.0, 0.0)
    return Recipe(cfg.base_lr * lc.lr_scale, lc.max_epochs, lc.patience, lc.val_split,
                  lc.lower_lr_multiplier, lc.l2sp_coeff, weights)


@dataclass
class FineTuneResult:
    epochs_run: int
    steps: int
    train_loss: float
    val_loss: float
    initial_val_loss: float
    best_epoch: int
    val_history: list[float]
    rejected: int = 0


def _split(n: int, val_split: float) -> int:
    if n < 2:
        return 0
    return int(min(n - 1, max(1, round(val_split * n))))


def fine_tune(model: Predictor, data: Batch, recipe: Recipe, mask: FreezeMask, *,
              batch_size: int, seq_len: int, optim_cfg, rng: np.random.Generator,
              anchor: dict[str, np.ndarray] | None = None,
              admissible: Callable[[Predictor], bool] | None = None) -> FineTuneResult:
    """Mini-batch AdamW on the joint loss plus an L2-SP pull toward ``anchor``.

    The last ``val_split`` share of ``data`` is held out, training stops when
    the validation loss has not improved for ``patience`` epochs (never before
    ``min_steps`` updates), and the best parameters seen are restored. The
    starting parameters count as epoch 0, so the restored validation loss is
    never worse than the initial one.

    With ``admissible`` given, the restored parameters are those of the best
    improving epoch that passes the check; the starting parameters are the
    fallback and are not checked.
    """
    n = len(data)
    n_val = _split(n, recipe.val_split)
    train, val = data.take(slice(0, n - n_val)), data.take(slice(n - n_val, n))
    if n_val == 0:
        val = train
    anchor = model.copy_params() if anchor is None else anchor
    active = [k for k in model.params if mask.is_trainable(GROUP_OF[k])]
    opt = AdamW(model.params, lr=recipe.lr, beta1=optim_cfg.beta1, beta2=optim_cfg.beta2,
                eps=optim_cfg.adam_eps, weight_decay=optim_cfg.weight_decay)
    mults = lr_multipliers(recipe.lower_lr_multiplier)
    head_only = mask.trainable == frozenset({"head"})

    if head_only:
        feats_train = model.forward(train)[1]["pooled"]
        feats_val = model.forward(val)[1]["pooled"]

    def val_loss() -> float:
        if head_only:
            yh = feats_val @ model.params["W_h"].T + model.params["b_h"]
        else:
            yh = model.predict(val)
        return joint_loss_grad(yh, val.y, recipe.weights, seq_len)[0]

    n_train = len(train)
    starts = list(range(0, n_train, batch_size))
    best = val_loss()
    initial = best
    candidates = [(0, {k: model.params[k].copy() for k in active}, best)]
    stale, steps, epoch = 0, 0, 0
    history = [best]
    train_loss = float("nan")
    while epoch < recipe.max_epochs or steps < recipe.min_steps:
        epoch += 1
        losses = []
        for s in rng.permutation(starts):
            sl = slice(s, min(s + batch_size, n_train))
            yb = train.y[sl]
            if head_only:
                f = feats_train[sl]
                yh = f @ model.params["W_h"].T + model.params["b_h"]
                loss, dy = joint_loss_grad(yh, yb, recipe.weights, seq_len)
                grads = {"W_h": dy.T @ f, "b_h": dy.sum(axis=0)}
            else:
                yh, cache = model.forward(train.take(sl))
                loss, dy = joint_loss_grad(yh, yb, recipe.weights, seq_len)
                grads = model.backward(cache, dy)
            if recipe.l2sp_coeff:
                for k in active:
                    delta = model.params[k] - anchor[k]
                    grads[k] = grads[k] + 2.0 * recipe.l2sp_coeff * delta
                    loss += recipe.l2sp_coeff * float(np.sum(delta * delta))
            opt.step(model.params, grads, mask, mults)
            steps += 1
            losses.append(loss)
        train_loss = float(np.mean(losses))
        current = val_loss()
        history.append(current)
        if current < best:
            best, stale = current, 0
            candidates.append((epoch, {k: model.params[k].copy() for k in active}, current))
        else:
            stale += 1
        if stale >= recipe.patience and steps >= recipe.min_steps:
            break
    # improving epochs have strictly decreasing validation loss: newest is best
    rejected = 0
    for best_epoch, params, best in reversed(candidates):
        model.load_params(params)
        if best_epoch == 0 or admissible is None or admissible(model):
            break
        rejected += 1
    return FineTuneResult(epoch, steps, train_loss, best, initial, best_epoch, history, rejected)


def timed_fine_tune(*args, **kwargs) -> tuple[FineTuneResult, float]:
    t0 = time.perf_counter()
    result = fine_tune(*args, **kwargs)
    return result, (time.perf_counter() - t0) * 1000.0
