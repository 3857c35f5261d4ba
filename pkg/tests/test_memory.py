import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from driftadapt.memory import (MemoryQueue, aggregate, context_weights, fuse, make_memory_item,
                               sigmoid)

finite = st.floats(-50, 50, allow_nan=False)


def test_push_examples():
    q = MemoryQueue(1, 2)
    assert len(q.push(np.array([1.0]))) == 1
    q.push(np.array([2.0])).push(np.array([3.0]))
    np.testing.assert_array_equal(q.to_array()[:, 0], [2.0, 3.0])
    q4 = MemoryQueue(1, 4).extend(np.arange(1.0, 7.0)[:, None])
    np.testing.assert_array_equal(q4.to_array()[:, 0], [3.0, 4.0, 5.0, 6.0])
    with pytest.raises(ValueError):
        q4.push(np.zeros(2))


def test_aggregate_examples():
    assert np.array_equal(aggregate([], 4, 3), np.zeros(3))
    np.testing.assert_array_equal(aggregate([np.array([5.0, 1.0])], 4, 2), [5.0, 1.0])
    np.testing.assert_array_equal(aggregate([np.array([1.0]), np.array([3.0])], 2, 1), [2.0])
    # R smaller than the queue uses only the newest items
    np.testing.assert_array_equal(aggregate([np.array([x]) for x in (1.0, 2.0, 9.0)], 1, 1), [9.0])


def test_fuse_examples():
    z, m = np.array([1.0, -2.0]), np.array([3.0, 4.0])
    np.testing.assert_allclose(fuse(z, m, np.zeros((2, 4)), np.zeros(2)), (z + m) / 2)
    np.testing.assert_allclose(fuse(z, m, np.zeros((2, 4)), np.full(2, 20.0)), z, atol=1e-7)
    out = fuse(np.array([1.0]), np.array([0.0]), np.array([[1.0, 0.0]]), np.zeros(1))
    np.testing.assert_allclose(out, [1.0 / (1.0 + np.exp(-1.0))], rtol=0, atol=1e-15)
    assert abs(out[0] - 0.7311) < 1e-4


def test_memory_item_examples():
    np.testing.assert_array_equal(make_memory_item(np.zeros((5, 2)), np.eye(2), np.zeros(2)), [0, 0])
    np.testing.assert_array_equal(make_memory_item(np.zeros(1), np.zeros((1, 1)), np.array([-1.0])), [0])
    np.testing.assert_allclose(make_memory_item(np.full((4, 1), 2.0), np.array([[1.5]]),
                                                np.array([0.5])), [3.5])


def test_sigmoid_is_stable_at_extremes():
    s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0])


@given(st.lists(st.integers(0, 100), max_size=60), st.integers(1, 6))
def test_queue_capacity_and_fifo(tags, cap):
    q = MemoryQueue(1, cap)
    for tag in tags:
        q.push(np.array([float(tag)]))
        assert len(q) <= cap
    assert [int(v) for v in q.to_array()[:, 0]] == tags[-cap:]


@given(arrays(float, 3, elements=finite), arrays(float, 3, elements=finite),
       arrays(float, (3, 6), elements=st.floats(-3, 3)), arrays(float, 3, elements=st.floats(-3, 3)))
def test_gate_is_convex(z, m, W, b):
    out = fuse(z, m, W, b)
    lo, hi = np.minimum(z, m), np.maximum(z, m)
    assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)


@given(arrays(float, 8, elements=st.floats(-30, 30)))
def test_gate_range_is_open_unit_interval(logits):
    g = sigmoid(logits)
    assert np.all((g > 0) & (g < 1))


@given(arrays(float, (3, 2), elements=finite), arrays(float, (4, 2), elements=finite),
       arrays(float, 4, elements=finite))
def test_memory_items_are_nonnegative(h, W, b):
    assert np.all(make_memory_item(h, W, b) >= 0)


def test_context_weights_match_queue_aggregation(rng):
    # each window column averages the R history slots that were in the queue before it
    L, R, C = 5, 3, 2
    S = L + R - 1
    hist = rng.normal(size=(1, S, C))
    valid = np.ones((1, S))
    valid[0, :2] = 0.0  # the two oldest steps precede the stream
    A = context_weights(valid, L, R)
    ctx = A @ hist
    for j in range(L):
        items = [hist[0, i] for i in range(j, j + R) if valid[0, i]]
        np.testing.assert_allclose(ctx[0, j], aggregate(items, R, C))
    assert np.allclose(A.sum(axis=2), 1.0)
    with pytest.raises(ValueError):
        context_weights(np.ones((1, S + 1)), L, R)


def test_context_weights_empty_history_is_zero():
    A = context_weights(np.zeros((2, 6)), 4, 3)
    assert not A.any()
