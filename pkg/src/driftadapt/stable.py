"""Error-driven head calibration for the no-drift state."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .adapt import EmptyAdaptationSet, Recipe, build_adaptation_set, fine_tune, FineTuneResult
from .predictor import Predictor, set_trainable

logger = logging.getLogger(__name__)


@dataclass
class StableState:
    lam: float = 0.6
    tau: float = 0.10
    k: int = 2
    lr: float = 0.1
    iters: int = 25
    e_hat: float = 0.0
    count: int = 0
    cache: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ValueError("EMA coefficient must lie in (0, 1]")
        if self.k < 1:
            raise ValueError("consecutive trigger count must be >= 1")

    @classmethod
    def from_config(cls, cfg) -> "StableState":
        return cls(cfg.stable_lambda, cfg.stable_tau, cfg.stable_k, cfg.stable_lr, cfg.stable_iters)

    def reset_count(self) -> None:
        self.count = 0


def window_error(preds: np.ndarray, labels: np.ndarray) -> float | None:
    """Window MAE averaged over steps and targets; ``None`` when any label is missing."""
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if preds.shape != labels.shape:
        raise ValueError("prediction and label windows differ in shape")
    if labels.size == 0 or np.isnan(labels).any() or np.isnan(preds).any():
        return None
    return float(np.mean(np.abs(preds - labels)))


def ema_update(e_prev: float, e_t: float, lam: float) -> float:
    if not 0 < lam <= 1:
        raise ValueError("EMA coefficient must lie in (0, 1]")
    return (1.0 - lam) * e_prev + lam * e_t


def stable_trigger(d_t: int, e_hat: float, state: StableState) -> bool:
    """Count consecutive exceedances in the no-drift state; fire and reset at ``k``."""
    if d_t == 0 and e_hat > state.tau:
        state.count += 1
    else:
        state.count = 0
    if state.count >= state.k:
        state.count = 0
        return True
    return False


def stable_recipe(cfg, state: StableState) -> Recipe:
    """Head-only recipe: level-1 schedule and weights with the dedicated learning rate."""
    lc = cfg.level(1)
    weights = lc.loss_weights if cfg.use_trend_terms else (0.0, 0.0, 0.0)
    return Recipe(state.lr, lc.max_epochs, lc.patience, lc.val_split, 1.0, lc.l2sp_coeff,
                  weights, min_steps=state.iters)


def stable_finetune(model: Predictor, now: int, buffer, z_cur: np.ndarray, cfg,
                    state: StableState, rng: np.random.Generator):
    """Calibrate the head on an adaptation set; returns (result, set) or ``None`` if no labels."""
    try:
        aset = build_adaptation_set(now, buffer, z_cur, project=model.project,
                                    sigma=cfg.bandwidth, n_ft=cfg.n_ft, tau_h=cfg.tau_h,
                                    eps=cfg.perturb_eps, rng=rng)
    except EmptyAdaptationSet:
        logger.info("stable calibration at t=%d skipped: no labeled samples", now)
        return None
    result: FineTuneResult = fine_tune(
        model, aset.batch(), stable_recipe(cfg, state), set_trainable("stable"),
        batch_size=cfg.batch_size, seq_len=cfg.seq_len, optim_cfg=cfg, rng=rng)
    return result, aset
