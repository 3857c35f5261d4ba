import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from driftadapt.config import RunConfig
from driftadapt.drift import (DriftState, apply_initial_cap, categorize, evaluate,
                              gaussian_kernel, mmd2, mmd2_many, promote_reference, should_detect)
from oracles import mmd2_double_sum

THR = (0.05, 0.12, 0.2)


def test_kernel_examples():
    a = np.array([0.3, -1.0])
    assert gaussian_kernel(a, a, 2.0) == 1.0
    assert abs(gaussian_kernel(np.zeros(1), np.array([1.7]), 1.7) - math.exp(-0.5)) < 1e-15
    assert gaussian_kernel(np.zeros(1), np.array([10.0]), 1.0) < 1e-21
    with pytest.raises(ValueError):
        gaussian_kernel(a, a, 0.0)


def test_mmd_examples():
    ref, cur = np.zeros((2, 1)), np.ones((2, 1))
    assert abs(mmd2(ref, cur, 1.0) - (2 - 2 * math.exp(-0.5))) < 1e-15
    z = np.random.default_rng(1).normal(size=(5, 4))
    assert abs(mmd2(z, z, 2.0)) < 1e-12
    with pytest.raises(ValueError):
        mmd2(np.zeros((3, 2)), np.zeros((4, 2)), 1.0)


def test_mmd_many_matches_single(rng):
    cands = rng.normal(size=(6, 5, 3))
    cur = rng.normal(size=(5, 3))
    np.testing.assert_allclose(mmd2_many(cands, cur, 1.3),
                               [mmd2(c, cur, 1.3) for c in cands], atol=1e-14)


windows = st.integers(1, 6).flatmap(lambda n: st.integers(1, 5).flatmap(
    lambda c: st.tuples(arrays(float, (n, c), elements=st.floats(-5, 5)),
                        arrays(float, (n, c), elements=st.floats(-5, 5)))))


@given(windows, st.floats(0.3, 5.0))
def test_mmd_matches_oracle_nonnegative_symmetric(pair, sigma):
    a, b = pair
    v = mmd2(a, b, sigma)
    assert abs(v - mmd2_double_sum(a.tolist(), b.tolist(), sigma)) < 1e-10
    assert v >= -1e-9
    assert abs(v - mmd2(b, a, sigma)) < 1e-9


def test_mmd_grows_with_mean_shift():
    # expected score is nondecreasing in the shift size (Spearman over many repetitions)
    rng = np.random.default_rng(0)
    deltas = np.linspace(0, 3, 13)
    means = [np.mean([mmd2(rng.normal(size=(5, 4)), rng.normal(d, 1, size=(5, 4)), 2.0)
                      for _ in range(200)]) for d in deltas]
    ranks = np.argsort(np.argsort(means))
    rho = np.corrcoef(ranks, np.arange(len(deltas)))[0, 1]
    assert rho > 0.9


@pytest.mark.parametrize("V, level", [(0.0, 0), (0.04, 0), (0.049, 0), (0.05, 1), (0.1199, 1),
                                      (0.12, 2), (0.2, 3), (0.25, 3), (7.0, 3)])
def test_categorize_boundaries(V, level):
    assert categorize(V, THR) == level


@given(st.floats(0, 2), st.floats(0, 2))
def test_categorize_is_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert categorize(lo, THR) <= categorize(hi, THR)


def test_categorize_rejects_unordered_thresholds():
    with pytest.raises(ValueError):
        categorize(0.1, (0.1, 0.1, 0.2))


@pytest.mark.parametrize("d, count, expected", [(3, 2, 1), (3, 4, 3), (0, 1, 0), (0, 9, 0),
                                                (2, 3, 1)])
def test_initial_cap(d, count, expected):
    assert apply_initial_cap(d, count, 3) == expected


def _state(reference=None):
    return DriftState(THR, cooldown=3, n_init=3, sigma=1.0, window=2, reference=reference)


def test_should_detect_rules():
    st_ = _state(np.zeros((2, 1)))
    assert not should_detect(10, st_, 1)
    assert should_detect(10, st_, 2)
    st_.t_last = 7
    assert should_detect(10, st_, 2)  # the cooldown bound is inclusive
    assert not should_detect(9, st_, 2)
    assert not should_detect(10, _state(None), 2)


def test_bandwidth_from_config():
    st_ = DriftState.from_config(RunConfig(channels=18), np.zeros((5, 18)))
    assert st_.sigma == 3.0 and st_.window == 5 and st_.thresholds == THR


def test_promotion_and_counter():
    st_ = _state(np.zeros((2, 1)))
    cur = np.ones((2, 1))
    det = evaluate(5, st_, cur)
    assert det.raw_level == 3 and det.effective_level == 1 and det.count == 1
    assert det.as_event()["C_t"] == 1
    promote_reference(st_, cur, 5)
    assert st_.count == 1 and st_.t_last == 5 and st_.ref_version == 1
    assert evaluate(8, st_, cur).V == 0.0
    assert not should_detect(7, st_, 2)
    for t in (8, 11, 14):
        promote_reference(st_, cur + t, t)
    assert st_.count == 4
    assert evaluate(17, st_, cur).effective_level == 3  # warm-up cap expired
    with pytest.raises(AssertionError):
        promote_reference(st_, cur, 20, adapted=False)


def test_no_detection_leaves_counter():
    st_ = _state(np.zeros((2, 1)))
    det = evaluate(5, st_, np.zeros((2, 1)))
    assert det.effective_level == 0 and det.count == 0
