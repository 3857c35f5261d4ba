"""Piecewise-stationary synthetic streams with known generating maps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .ingest import RawData


@dataclass
class Segment:
    length: int
    mean: float | list[float] = 0.0
    std: float | list[float] = 1.0
    phi: float = 0.5
    noise: float = 0.1
    gain: float = 2.0
    concept: int | None = None  # segments sharing an id share one generating map


@dataclass
class SynthSpec:
    segments: list[Segment]
    n_features: int = 8
    n_targets: int = 5
    window: int = 12

    @classmethod
    def from_dict(cls, spec: dict) -> "SynthSpec":
        segs = [Segment(**s) for s in spec["segments"]]
        rest = {k: v for k, v in spec.items() if k != "segments"}
        return cls(segs, **rest)

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @property
    def boundaries(self) -> list[int]:
        return list(np.cumsum([s.length for s in self.segments])[:-1])


@dataclass
class SynthStream:
    features: np.ndarray
    targets: np.ndarray
    boundaries: list[int]
    coefs: list[np.ndarray]
    segment_of: np.ndarray
    window: int
    clean_targets: np.ndarray = field(repr=False, default=None)

    def raw(self) -> RawData:
        F, K = self.features.shape[1], self.targets.shape[1]
        return RawData(self.features, self.targets, [f"x{j}" for j in range(F)],
                       [f"y{k}" for k in range(K)])

    def to_frame(self) -> pd.DataFrame:
        raw = self.raw()
        frame = pd.DataFrame(self.features, columns=raw.feature_names)
        for k, name in enumerate(raw.target_names):
            frame[name] = self.targets[:, k]
        return frame


def window_summary(X: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over at most ``window`` rows (shorter at the stream start)."""
    c = np.cumsum(np.vstack([np.zeros((1, X.shape[1])), X]), axis=0)
    idx = np.arange(1, len(X) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)[:, None]


def synth_stream(spec: SynthSpec | dict, seed: int) -> SynthStream:
    """Gaussian AR(1) features around each segment's mean; y = A_seg · window mean + noise."""
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    rng = np.random.default_rng(seed)
    F, K = spec.n_features, spec.n_targets
    xs, coefs, seg_of = [], [], []
    prev = None
    concepts: dict[int, np.ndarray] = {}
    for i, seg in enumerate(spec.segments):
        mean = np.broadcast_to(np.asarray(seg.mean, float), (F,))
        std = np.broadcast_to(np.asarray(seg.std, float), (F,))
        if seg.concept is not None and seg.concept in concepts:
            coefs.append(concepts[seg.concept])
        else:
            coefs.append(rng.normal(0.0, seg.gain / np.sqrt(F), size=(K, F)))
            if seg.concept is not None:
                concepts[seg.concept] = coefs[-1]
        innov = rng.standard_normal((seg.length, F)) * std * np.sqrt(1 - seg.phi ** 2)
        dev = np.zeros(F) if prev is None else prev
        x = np.empty((seg.length, F))
        for t in range(seg.length):
            dev = seg.phi * dev + innov[t]
            x[t] = mean + dev
        prev = dev
        xs.append(x)
        seg_of.append(np.full(seg.length, i))
    X = np.vstack(xs)
    seg_of = np.concatenate(seg_of)
    summary = window_summary(X, spec.window)
    clean = np.einsum("tkf,tf->tk", np.stack(coefs)[seg_of], summary)
    noise = np.concatenate([rng.standard_normal((s.length, K)) * s.noise for s in spec.segments])
    return SynthStream(X, clean + noise, spec.boundaries, coefs, seg_of, spec.window, clean)


def two_segment_spec(shift: float = 3.0, length: int = 500, noise: float = 0.1) -> SynthSpec:
    """One feature-mean shift of ``shift`` at ``length``, with a new generating map after it."""
    return SynthSpec([Segment(length, mean=0.0, noise=noise),
                      Segment(length, mean=shift, noise=noise)])


def recurring_shift_spec(shift: float = 2.5, warmup: int = 400, length: int = 300,
                         visits: int = 5, noise: float = 0.1) -> SynthSpec:
    """A warm-up regime followed by two concepts at +/-``shift`` that alternate ``visits`` times.

    Neither concept matches the warm-up map, so a frozen model stays wrong
    after every boundary, while revisits give the replay buffer matching history.
    """
    segs = [Segment(warmup, mean=0.0, noise=noise, concept=0)]
    for v in range(visits):
        sign = 1.0 if v % 2 == 0 else -1.0
        segs.append(Segment(length, mean=sign * shift, noise=noise, concept=1 + v % 2))
    return SynthSpec(segs)
