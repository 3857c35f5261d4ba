"""Unsupervised drift scoring with a Gaussian-kernel MMD and severity gating."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def gaussian_kernel(a: np.ndarray, b: np.ndarray, sigma: float) -> float:
    if sigma <= 0:
        raise ValueError("kernel bandwidth must be positive")
    d = np.asarray(a, float) - np.asarray(b, float)
    return float(np.exp(-np.dot(d, d) / (2.0 * sigma * sigma)))


def _gram(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    """Kernel matrices for stacked windows: a (..., n, C), b (..., m, C) -> (..., n, m)."""
    d2 = (np.sum(a * a, axis=-1)[..., :, None] + np.sum(b * b, axis=-1)[..., None, :]
          - 2.0 * a @ np.swapaxes(b, -1, -2))
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma * sigma))


def mmd2(z_ref: np.ndarray, z_cur: np.ndarray, sigma: float) -> float:
    """Biased squared MMD between two equal-length windows (diagonal terms included)."""
    if sigma <= 0:
        raise ValueError("kernel bandwidth must be positive")
    z_ref = np.asarray(z_ref, float)
    z_cur = np.asarray(z_cur, float)
    if z_ref.shape != z_cur.shape or z_ref.ndim != 2:
        raise ValueError(f"windows must share shape (L_w, C): {z_ref.shape} vs {z_cur.shape}")
    return float(mmd2_many(z_ref[None], z_cur, sigma)[0])


def mmd2_many(candidates: np.ndarray, z_cur: np.ndarray, sigma: float) -> np.ndarray:
    """Score a stack of windows (M, L_w, C) against one window (L_w, C)."""
    candidates = np.asarray(candidates, float)
    z_cur = np.asarray(z_cur, float)
    if candidates.shape[1:] != z_cur.shape:
        raise ValueError("candidate windows must match the current window's shape")
    n = z_cur.shape[0]
    k_rr = _gram(candidates, candidates, sigma).sum(axis=(1, 2))
    k_cc = _gram(z_cur, z_cur, sigma).sum()
    k_rc = _gram(candidates, z_cur[None], sigma).sum(axis=(1, 2))
    return (k_rr + k_cc - 2.0 * k_rc) / (n * n)


def categorize(V: float, thresholds: tuple[float, float, float]) -> int:
    mild, mod, sev = thresholds
    if not mild < mod < sev:
        raise ValueError("thresholds must be strictly increasing")
    if V >= sev:
        return 3
    if V >= mod:
        return 2
    if V >= mild:
        return 1
    return 0


def apply_initial_cap(d: int, count: int, n_init: int) -> int:
    """Cap the level at 1 while the event counter is still within the warm-up."""
    return min(d, 1) if count <= n_init else d


@dataclass
class DriftState:
    thresholds: tuple[float, float, float]
    cooldown: int
    n_init: int
    sigma: float
    window: int
    reference: np.ndarray | None = None
    t_last: float = -math.inf
    count: int = 0
    ref_version: int = 0

    def __post_init__(self):
        mild, mod, sev = self.thresholds
        if not mild < mod < sev:
            raise ValueError("thresholds must satisfy mild < mod < sev")
        if self.sigma <= 0:
            raise ValueError("kernel bandwidth must be positive")

    @classmethod
    def from_config(cls, cfg, reference: np.ndarray | None = None) -> "DriftState":
        state = cls(cfg.thresholds, cfg.cooldown, cfg.n_init, cfg.bandwidth, cfg.detect_window)
        if reference is not None:
            state.reference = np.array(reference, dtype=float)
        return state


def should_detect(now: int, state: DriftState, window_fill: int) -> bool:
    return (window_fill >= state.window and state.reference is not None
            and now - state.t_last >= state.cooldown)


@dataclass
class Detection:
    t: int
    V: float
    raw_level: int
    effective_level: int
    count: int

    def as_event(self) -> dict:
        return {"t": self.t, "V": self.V, "raw_level": self.raw_level,
                "effective_level": self.effective_level, "C_t": self.count}


def evaluate(now: int, state: DriftState, z_cur: np.ndarray) -> Detection:
    """Score the current window and map it to an (initially capped) severity level.

    ``count`` on the result is the index this event would get if it leads to
    an adaptation, so the first ``n_init`` adaptations are capped.
    """
    V = mmd2(state.reference, z_cur, state.sigma)
    raw = categorize(V, state.thresholds)
    candidate = state.count + 1
    eff = apply_initial_cap(raw, candidate, state.n_init) if raw > 0 else 0
    return Detection(now, V, raw, eff, candidate if eff > 0 else state.count)


def promote_reference(state: DriftState, z_cur: np.ndarray, now: int,
                      adapted: bool = True) -> DriftState:
    assert adapted, "reference may only move after a completed adaptation"
    state.reference = np.array(z_cur, dtype=float)
    state.t_last = now
    state.count += 1
    state.ref_version += 1
    return state

