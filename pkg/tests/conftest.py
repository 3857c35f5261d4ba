"""Shared fixtures: small configurations and synthetic streams that keep tests fast."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from driftadapt.config import RunConfig
from driftadapt.ingest import prepare_stream
from driftadapt.synth import Segment, SynthSpec, synth_stream

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**overrides) -> RunConfig:
    """A down-scaled configuration for plumbing tests (not for efficacy claims)."""
    base = dict(window=6, channels=4, offline_size=80, offline_epochs=4, offline_patience=2,
                batch_size=16, n_ft=40, n_buf=120, latency=3, detect_window=3, seq_len=4,
                n_targets=2, stable_iters=4)
    base.update(overrides)
    return RunConfig(**base)


def tiny_stream(cfg: RunConfig, length: int = 160, shift: float = 3.0, seed: int = 0,
                n_features: int = 3):
    half = length // 2
    spec = SynthSpec([Segment(half, mean=0.0), Segment(length - half, mean=shift)],
                     n_features=n_features, n_targets=cfg.n_targets, window=cfg.window)
    synth = synth_stream(spec, seed)
    stream, stats = prepare_stream(synth.raw(), cfg.offline_size, cfg.latency)
    return synth, stream, stats


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------- acceptance summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Keep one verdict per acceptance criterion for the end-of-run summary."""
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
