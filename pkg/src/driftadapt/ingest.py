"""Stream loading, gap filling, min-max scaling, windowing and the label-latency rule."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class IngestionError(ValueError):
    pass


class WindowUnavailable(LookupError):
    """Raised when a window would reach before the start of the stream."""


@dataclass(frozen=True)
class Sample:
    t: int
    x: np.ndarray
    y: np.ndarray | None
    label_release_t: int


@dataclass(frozen=True)
class InputWindow:
    values: np.ndarray  # (F, L), columns oldest first
    end: int

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    feat_min: np.ndarray
    feat_max: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    target_min: np.ndarray
    target_max: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray, targets: np.ndarray) -> "NormStats":
        features = np.asarray(features, dtype=float)
        targets = np.asarray(targets, dtype=float)
        return cls(
            feat_min=np.nanmin(features, axis=0),
            feat_max=np.nanmax(features, axis=0),
            target_mean=np.nanmean(targets, axis=0),
            target_std=np.nanstd(targets, axis=0),
            target_min=np.nanmin(targets, axis=0),
            target_max=np.nanmax(targets, axis=0),
        )

    @classmethod
    def identity(cls, n_features: int, n_targets: int) -> "NormStats":
        zf, of = np.zeros(n_features), np.ones(n_features)
        zk, ok = np.zeros(n_targets), np.ones(n_targets)
        return cls(zf, of, zk, ok, zk, ok)

    @property
    def target_range(self) -> np.ndarray:
        span = self.target_max - self.target_min
        return np.where(span > 0, span, 1.0)

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


def interpolate_missing(series: np.ndarray, names: list[str] | None = None) -> np.ndarray:
    """Fill NaN gaps per column: linear inside, nearest observed value at the edges."""
    arr = np.array(series, dtype=float)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[:, None]
    idx = np.arange(arr.shape[0])
    for j in range(arr.shape[1]):
        col = arr[:, j]
        observed = ~np.isnan(col)
        if not observed.any():
            name = names[j] if names else f"#{j}"
            raise IngestionError(f"feature {name} has no observed values")
        if not observed.all():
            # np.interp holds the end values constant outside the observed range
            arr[:, j] = np.interp(idx, idx[observed], col[observed])
    return arr[:, 0] if squeeze else arr


def minmax_normalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    span = stats.feat_max - stats.feat_min
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - stats.feat_min) / safe, 0.0)


@dataclass
class Stream:
    """Aligned, normalized stream with per-sample label release times."""

    X: np.ndarray
    Y: np.ndarray
    latency: int
    feature_names: list[str] = field(default_factory=list)
    target_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.X.ndim != 2 or self.Y.ndim != 2 or len(self.X) != len(self.Y):
            raise IngestionError("X and Y must be 2-D with one row per time step")
        if np.isnan(self.X).any():
            raise IngestionError("features still contain missing values")
        if self.latency < 0:
            raise IngestionError("latency must be >= 0")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.X.shape[1])]
        if not self.target_names:
            self.target_names = [f"y{k}" for k in range(self.Y.shape[1])]

    def __len__(self) -> int:
        return len(self.X)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_targets(self) -> int:
        return self.Y.shape[1]

    def release_time(self, t: int) -> int:
        return t + self.latency

    def has_label(self, t: int) -> bool:
        return not np.isnan(self.Y[t]).any()

    def label_visible(self, t: int, now: int) -> bool:
        return self.release_time(t) <= now and self.has_label(t)

    def label(self, t: int, now: int) -> np.ndarray:
        if not self.label_visible(t, now):
            raise PermissionError(f"label of t={t} is not visible at time {now}")
        return self.Y[t]

    def sample(self, t: int, now: int) -> Sample:
        y = self.Y[t].copy() if self.label_visible(t, now) else None
        return Sample(t=t, x=self.X[t].copy(), y=y, label_release_t=self.release_time(t))

    def slice(self, start: int, stop: int) -> "Stream":
        return Stream(self.X[start:stop], self.Y[start:stop], self.latency,
                      list(self.feature_names), list(self.target_names))


def make_window(stream: Stream | np.ndarray, t: int, L: int) -> InputWindow:
    X = stream.X if isinstance(stream, Stream) else np.asarray(stream)
    if t < L - 1 or t >= len(X):
        raise WindowUnavailable(f"no window of length {L} ends at t={t}")
    return InputWindow(values=X[t - L + 1:t + 1].T.copy(), end=t)


def visible_labels(stream: Stream, now: int) -> list[tuple[int, np.ndarray]]:
    last = min(now - stream.latency, len(stream) - 1)
    return [(t, stream.Y[t]) for t in range(0, last + 1) if stream.has_label(t)]


@dataclass(frozen=True)
class Schema:
    features: list[str]
    targets: list[str]
    mask: str | None = None

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
        try:
            return cls(list(spec["features"]), list(spec["targets"]), spec.get("mask"))
        except KeyError as exc:
            raise IngestionError(f"schema {path} lacks key {exc}") from None


@dataclass
class RawData:
    features: np.ndarray
    targets: np.ndarray
    feature_names: list[str]
    target_names: list[str]


def read_csv(data_path: str | Path, schema: Schema) -> RawData:
    """Read aligned rows; rows whose mask column is falsy are dropped."""
    frame = pd.read_csv(data_path, encoding="utf-8")
    missing = [c for c in schema.features + schema.targets if c not in frame.columns]
    if missing:
        raise IngestionError(f"{data_path}: missing columns {missing}")
    if schema.mask:
        if schema.mask not in frame.columns:
            raise IngestionError(f"{data_path}: missing mask column {schema.mask!r}")
        keep = frame[schema.mask].fillna(0).astype(bool).to_numpy()
        frame = frame.loc[keep].reset_index(drop=True)
    feats = frame[schema.features].apply(pd.to_numeric, errors="coerce").to_numpy(float)
    targs = frame[schema.targets].apply(pd.to_numeric, errors="coerce").to_numpy(float)
    return RawData(feats, targs, list(schema.features), list(schema.targets))


def prepare_stream(raw: RawData, offline_size: int, latency: int) -> tuple[Stream, NormStats]:
    """Fill gaps, fit scaling on the first ``offline_size`` rows only, normalize."""
    if offline_size > len(raw.features):
        raise IngestionError("offline split is longer than the stream")
    filled = interpolate_missing(raw.features, raw.feature_names)
    stats = NormStats.fit(filled[:offline_size], raw.targets[:offline_size])
    X = minmax_normalize(filled, stats)
    stream = Stream(X, raw.targets, latency, raw.feature_names, raw.target_names)
    logger.info("prepared stream: %d rows, %d features, %d targets",
                len(stream), stream.n_features, stream.n_targets)
    return stream, stats
