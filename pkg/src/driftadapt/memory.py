"""Dynamic memory queue, memory aggregation and gated fusion."""

from __future__ import annotations

from collections import deque
from typing import Iterable

import numpy as np


def sigmoid(a: np.ndarray) -> np.ndarray:
    # 1 / (1 + e^-a) written via logaddexp so large |a| never overflows
    return np.exp(-np.logaddexp(0.0, -np.asarray(a, dtype=float)))


class MemoryQueue:
    """FIFO of C-dimensional memory items, oldest first."""

    def __init__(self, dim: int, capacity: int, agg_len: int | None = None):
        agg_len = capacity if agg_len is None else agg_len
        if not 1 <= agg_len <= capacity:
            raise ValueError("aggregation length must satisfy 1 <= R <= capacity")
        self.dim = dim
        self.capacity = capacity
        self.agg_len = agg_len
        self._items: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    @property
    def items(self) -> list[np.ndarray]:
        return list(self._items)

    def push(self, m: np.ndarray) -> "MemoryQueue":
        m = np.asarray(m, dtype=float)
        if m.shape != (self.dim,):
            raise ValueError(f"memory item must have shape ({self.dim},), got {m.shape}")
        self._items.append(m.copy())
        return self

    def extend(self, items: Iterable[np.ndarray]) -> "MemoryQueue":
        for m in items:
            self.push(m)
        return self

    def clear(self) -> None:
        self._items.clear()

    def aggregate(self, R: int | None = None) -> np.ndarray:
        return aggregate(self.items, self.agg_len if R is None else R, self.dim)

    def to_array(self) -> np.ndarray:
        if not self._items:
            return np.zeros((0, self.dim))
        return np.stack(self._items)


def aggregate(items: list[np.ndarray], R: int, dim: int) -> np.ndarray:
    """Mean of the ``min(R, len(items))`` newest items; zeros for an empty queue."""
    r = min(R, len(items))
    if r == 0:
        return np.zeros(dim)
    return np.mean(np.stack(items[-r:]), axis=0)


def fuse(z: np.ndarray, mbar: np.ndarray, W_g: np.ndarray, b_g: np.ndarray) -> np.ndarray:
    g = sigmoid(W_g @ np.concatenate([z, mbar]) + b_g)
    return g * z + (1.0 - g) * mbar


def make_memory_item(h: np.ndarray, W_m: np.ndarray, b_m: np.ndarray) -> np.ndarray:
    """``h`` is the (L, C') backbone feature map, or its already pooled (C',) vector."""
    h = np.asarray(h, dtype=float)
    pooled = h.mean(axis=0) if h.ndim == 2 else h
    return np.maximum(W_m @ pooled + b_m, 0.0)


def context_weights(valid: np.ndarray, window: int, agg_len: int) -> np.ndarray:
    """Averaging weights from a pooled-feature history to per-column memory contexts.

    ``valid`` has shape (B, window + agg_len - 1): entry i flags whether the
    history slot for step ``t - window - agg_len + 1 + i`` holds a pooled
    feature. Column j of the window sees slots j .. j + agg_len - 1, i.e. the
    queue contents just before that column's step. Returns (B, window, slots).
    """
    valid = np.asarray(valid, dtype=float)
    B, n = valid.shape
    if n != window + agg_len - 1:
        raise ValueError("history length must equal window + agg_len - 1")
    band = np.zeros((window, n))
    for j in range(window):
        band[j, j:j + agg_len] = 1.0
    w = band[None, :, :] * valid[:, None, :]
    counts = w.sum(axis=2, keepdims=True)
    return np.divide(w, counts, out=np.zeros_like(w), where=counts > 0)
