import math

import pytest

from driftadapt.config import (ABLATIONS, ConfigError, RunConfig, apply_ablation,
                               config_from_mapping, load_config)


def test_published_defaults():
    cfg = RunConfig()
    assert cfg.thresholds == (0.05, 0.12, 0.2)
    assert (cfg.cooldown, cfg.n_init, cfg.detect_window) == (3, 3, 5)
    assert (cfg.n_ft, cfg.n_buf, cfg.tau_h, cfg.perturb_eps) == (300, 800, 0.05, 0.01)
    assert (cfg.stable_lambda, cfg.stable_tau, cfg.stable_k) == (0.6, 0.10, 2)
    assert (cfg.stable_lr, cfg.stable_iters) == (0.1, 25)
    assert (cfg.queue_capacity, cfg.agg_len, cfg.window) == (4, 4, 12)
    assert cfg.offline_size == 1500 and cfg.batch_size == 32
    assert cfg.bandwidth == math.sqrt(cfg.channels / 2) == 4.0


@pytest.mark.parametrize("level, lr_scale, epochs, patience, split, l2sp, weights", [
    (1, 0.10, 30, 5, 0.15, 5e-5, (0.3, 0.2, 0.05)),
    (2, 0.15, 40, 8, 0.12, 2e-6, (0.5, 0.3, 0.1)),
    (3, 0.25, 50, 10, 0.10, 0.0, (0.7, 0.4, 0.2)),
])
def test_level_recipes(level, lr_scale, epochs, patience, split, l2sp, weights):
    lc = RunConfig().level(level)
    assert (lc.lr_scale, lc.max_epochs, lc.patience, lc.val_split, lc.l2sp_coeff) == \
        (lr_scale, epochs, patience, split, l2sp)
    assert lc.loss_weights == weights


@pytest.mark.parametrize("bad", [
    dict(lambda_mild=0.2), dict(agg_len=5), dict(short_kernel=4), dict(branches=()),
    dict(stable_lambda=0.0), dict(latency=-1), dict(recovery_mae=(0.1, 0.1)), dict(window=0),
])
def test_invalid_configs_are_rejected(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad)


def test_load_flat_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nlatency = 20\nuse_memory = false\nrecovery_mae = 0.1, 0.2, 0.3\n"
                 "level2.patience = 4  # trailing\nbranches = short\n")
    cfg = load_config(p)
    assert cfg.latency == 20 and cfg.use_memory is False
    assert cfg.recovery_mae == (0.1, 0.2, 0.3)
    assert cfg.level(2).patience == 4 and cfg.level(1).patience == 5
    assert cfg.branches == ("short",)


@pytest.mark.parametrize("mapping", [{"nonsense": 1}, {"level4.patience": 2},
                                     {"level1.unknown": 2}, {"latency": 1.5},
                                     {"use_drift": 3}])
def test_bad_keys_and_types(mapping):
    with pytest.raises(ConfigError):
        config_from_mapping(mapping)


def test_malformed_line(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("latency 12\n")
    with pytest.raises(ConfigError, match=":1:"):
        load_config(p)


def test_to_dict_round_trips_through_mapping():
    cfg = RunConfig(latency=7, recovery_mae=(0.2, 0.3, 0.4))
    assert config_from_mapping(cfg.to_dict()) == cfg


def test_ablation_switches():
    cfg = RunConfig()
    assert apply_ablation(cfg, "full") == cfg
    assert apply_ablation(cfg, "no_memory").use_memory is False
    assert apply_ablation(cfg, "no_drift").use_drift is False
    assert apply_ablation(cfg, "no_stable").use_stable is False
    static = apply_ablation(cfg, "static")
    assert not static.use_drift and not static.use_stable
    assert apply_ablation(cfg, "mse_only").use_trend_terms is False
    assert apply_ablation(cfg, "short_only").branches == ("short",)
    assert apply_ablation(cfg, "long_only").branches == ("long",)
    assert set(ABLATIONS) == {"full", "no_memory", "no_drift", "no_stable", "static",
                              "mse_only", "short_only", "long_only"}
    with pytest.raises(ConfigError):
        apply_ablation(cfg, "nope")
