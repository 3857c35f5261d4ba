import numpy as np
import pytest

from driftadapt.predictor import (GROUP_OF, GROUPS, AdamW, Batch, FreezeMask, Predictor,
                                  conv1d_same, load_checkpoint, lr_multipliers, params_digest,
                                  save_checkpoint, set_trainable)
from oracles import conv_same_oracle, fd_gradient_errors, min_kink_distance, random_tiny_model


def _batch(model, B=3, rng=None):
    rng = rng or np.random.default_rng(0)
    S = model.history_len
    return Batch(rng.normal(size=(B, model.window, model.n_features)),
                 rng.normal(size=(B, S, model.pooled_dim)), np.ones((B, S)))


def test_projection_examples():
    m = Predictor(2, 1, window=3, channels=1)
    m.params["W_p"] = np.array([[1.0, 2.0]])
    m.params["b_p"] = np.array([0.5])
    np.testing.assert_array_equal(m.project(np.array([3.0, 4.0])), [11.5])
    m2 = Predictor(3, 1, window=3, channels=3)
    m2.params["W_p"], m2.params["b_p"] = np.eye(3), np.zeros(3)
    x = np.array([0.1, -2.0, 7.0])
    np.testing.assert_array_equal(m2.project(x), x)
    m2.params["W_p"] = np.zeros((3, 3))
    assert not m2.project(x).any()


def test_conv_example_and_oracle(rng):
    out = conv1d_same(np.array([[1.0, 2.0, 3.0]]), np.ones((1, 1, 3)), np.zeros(1))
    np.testing.assert_array_equal(out, [[3.0, 6.0, 5.0]])
    for k in (3, 5, 7):
        x, W, b = rng.normal(size=(4, 9)), rng.normal(size=(3, 4, k)), rng.normal(size=3)
        np.testing.assert_allclose(conv1d_same(x, W, b), conv_same_oracle(x, W, b), atol=1e-12)


def test_zero_weights_predict_head_bias():
    m = Predictor(3, 2, window=5, channels=4)
    for k in m.params:
        if k != "b_h":
            m.params[k] = np.zeros_like(m.params[k])
    m.params["b_h"] = np.array([1.5, -2.0])
    np.testing.assert_array_equal(m.predict(_batch(m)), np.tile([1.5, -2.0], (3, 1)))


def test_zero_window_with_zero_biases_gives_head_bias():
    m = Predictor(3, 2, window=5, channels=4, use_memory=False)
    for k in ("b_p", "bs1", "bs2", "bl1", "bl2"):
        m.params[k] = np.zeros_like(m.params[k])
    b = _batch(m)
    b.x[:] = 0.0
    yhat, cache = m.forward(b)
    assert not cache["pooled"].any()
    np.testing.assert_array_equal(yhat, np.tile(m.params["b_h"], (3, 1)))


def test_zero_upstream_gradient_gives_zero_grads():
    m = Predictor(3, 2, window=5, channels=4)
    _, cache = m.forward(_batch(m))
    assert all(not g.any() for g in m.backward(cache, np.zeros((3, 2))).values())


def test_head_bias_gradient_of_half_squared_error():
    m = Predictor(3, 2, window=5, channels=4)
    b = _batch(m, B=1)
    y = np.array([[0.3, -0.1]])
    yhat, cache = m.forward(b)
    grads = m.backward(cache, yhat - y)
    np.testing.assert_allclose(grads["b_h"], (yhat - y)[0])


@pytest.mark.parametrize("use_memory, branches", [(True, ("short", "long")),
                                                  (False, ("short", "long")),
                                                  (True, ("long",))])
def test_gradients_match_finite_differences(use_memory, branches):
    rng = np.random.default_rng(7)
    for _ in range(20):
        model, batch = random_tiny_model(rng, use_memory, branches)
        if min_kink_distance(model, batch) > 1e-4:
            break
    dy = rng.normal(size=(len(batch), model.n_targets))
    errors = fd_gradient_errors(model, batch, dy)
    assert max(errors.values()) < 1e-4, errors


def test_spec_sized_gradient_check():
    rng = np.random.default_rng(3)
    for seed in range(50):
        m = Predictor(3, 2, window=5, channels=4, agg_len=2, seed=seed)
        b = Batch(rng.normal(size=(3, 5, 3)), rng.normal(size=(3, 6, 8)), np.ones((3, 6)))
        if min_kink_distance(m, b) > 1e-4:
            break
    errors = fd_gradient_errors(m, b, rng.normal(size=(3, 2)), step=1e-5)
    assert max(errors.values()) < 1e-4, errors


def test_forward_is_pure():
    m = Predictor(3, 2, window=5, channels=4)
    b = _batch(m)
    before = params_digest(m.params)
    a1, a2 = m.predict(b), m.predict(b)
    assert np.array_equal(a1, a2) and params_digest(m.params) == before


def test_invalid_window_shape():
    m = Predictor(3, 2, window=5, channels=4)
    with pytest.raises(ValueError):
        m.forward(Batch(np.zeros((1, 4, 3)), np.zeros((1, 8, 8)), np.ones((1, 8))))


def test_set_trainable_tiers():
    assert set_trainable(1).trainable == {"head"}
    assert set_trainable("stable") == set_trainable(1)
    assert {"head", "upper"} <= set_trainable(2).trainable
    assert not {"lower", "projection"} & set_trainable(2).trainable
    assert set_trainable(3).trainable == set(GROUPS)
    with pytest.raises(ValueError):
        set_trainable(4)
    with pytest.raises(ValueError):
        FreezeMask(frozenset({"bogus"}))
    assert set(GROUP_OF.values()) == set(GROUPS)


def test_adamw_first_step_and_decay():
    p = {"b_h": np.array([2.0])}
    opt = AdamW(p, lr=0.01, weight_decay=0.0)
    opt.step(p, {"b_h": np.array([-3.7])})
    np.testing.assert_allclose(p["b_h"], [2.0 + 0.01], rtol=0, atol=1e-9)
    q = {"b_h": np.array([2.0])}
    opt = AdamW(q, lr=0.01, weight_decay=0.5)
    opt.step(q, {"b_h": np.array([0.0])})
    np.testing.assert_allclose(q["b_h"], [2.0 * (1 - 0.01 * 0.5)], rtol=0, atol=1e-15)


def test_adamw_respects_freeze_mask_and_multipliers(rng):
    m = Predictor(3, 2, window=5, channels=4)
    before = m.copy_params()
    grads = {k: np.ones_like(v) for k, v in m.params.items()}
    AdamW(m.params, lr=0.01).step(m.params, grads, FreezeMask.none())
    assert params_digest(m.params) == params_digest(before)
    # identical gradients: the lower groups move by multiplier x the head's step
    m.params = {k: v.copy() for k, v in before.items()}
    AdamW(m.params, lr=0.01, weight_decay=0.0).step(m.params, grads, FreezeMask.all(),
                                                    lr_multipliers(0.5))
    head = np.abs(m.params["b_h"] - before["b_h"]).max()
    low = np.abs(m.params["bs1"] - before["bs1"]).max()
    proj = np.abs(m.params["W_p"] - before["W_p"]).max()
    np.testing.assert_allclose([low / head, proj / head], [0.5, 0.5], rtol=1e-9)


def test_checkpoint_round_trip(tmp_path):
    m = Predictor(3, 2, window=5, channels=4, seed=4)
    opt = AdamW(m.params, lr=0.02)
    _, cache = m.forward(_batch(m))
    opt.step(m.params, m.backward(cache, np.ones((3, 2))))
    path = save_checkpoint(tmp_path / "c.npz", m, opt, queue_items=np.ones((2, 4)), meta={"t": 5})
    ck = load_checkpoint(path)
    assert params_digest(ck.model.params) == params_digest(m.params)
    assert ck.optimizer.steps == opt.steps and ck.optimizer.lr == 0.02
    np.testing.assert_array_equal(ck.queue_items, np.ones((2, 4)))
    assert ck.meta == {"t": 5}
    b = _batch(m)
    np.testing.assert_array_equal(ck.model.predict(b), m.predict(b))
