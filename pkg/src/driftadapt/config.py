"""Run configuration: defaults, validation, flat key-value file loading, ablations."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LevelConfig:
    """Fine-tuning recipe for one drift severity level."""

    level: int
    lr_scale: float
    max_epochs: int
    patience: int
    val_split: float
    lower_lr_multiplier: float
    l2sp_coeff: float
    w_trend: float
    w_diff: float
    w_vol: float

    def __post_init__(self):
        if self.level not in (1, 2, 3):
            raise ConfigError(f"level must be 1, 2 or 3, got {self.level}")
        if not self.lr_scale > 0:
            raise ConfigError(f"level{self.level}.lr_scale must be > 0")
        if not 0 < self.val_split < 1:
            raise ConfigError(f"level{self.level}.val_split must lie in (0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError(f"level{self.level}: max_epochs and patience must be >= 1")
        if min(self.w_trend, self.w_diff, self.w_vol, self.l2sp_coeff) < 0:
            raise ConfigError(f"level{self.level}: loss weights and l2sp_coeff must be >= 0")

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.w_trend, self.w_diff, self.w_vol)


def default_levels() -> dict[int, LevelConfig]:
    return {
        1: LevelConfig(1, lr_scale=0.10, max_epochs=30, patience=5, val_split=0.15,
                       lower_lr_multiplier=0.5, l2sp_coeff=5e-5,
                       w_trend=0.3, w_diff=0.2, w_vol=0.05),
        2: LevelConfig(2, lr_scale=0.15, max_epochs=40, patience=8, val_split=0.12,
                       lower_lr_multiplier=0.5, l2sp_coeff=2e-6,
                       w_trend=0.5, w_diff=0.3, w_vol=0.1),
        3: LevelConfig(3, lr_scale=0.25, max_epochs=50, patience=10, val_split=0.10,
                       lower_lr_multiplier=0.7, l2sp_coeff=0.0,
                       w_trend=0.7, w_diff=0.4, w_vol=0.2),
    }


ABLATIONS = ("full", "no_memory", "no_drift", "no_stable", "static",
             "mse_only", "short_only", "long_only")


@dataclass
class RunConfig:
    # backbone / data shape
    window: int = 12
    n_targets: int = 5
    channels: int = 32
    short_kernel: int = 3
    long_kernel: int = 7
    branches: tuple[str, ...] = ("short", "long")
    use_memory: bool = True

    # offline phase
    offline_size: int = 1500
    batch_size: int = 32
    offline_epochs: int = 200
    offline_patience: int = 20
    offline_val_split: float = 0.15

    # optimizer
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01

    # memory queue
    queue_capacity: int = 4
    agg_len: int = 4

    # drift detection
    use_drift: bool = True
    detect_window: int = 5
    cooldown: int = 3
    lambda_mild: float = 0.05
    lambda_mod: float = 0.12
    lambda_sev: float = 0.2
    n_init: int = 3

    # adaptation
    seq_len: int = 8
    n_ft: int = 300
    n_buf: int = 800
    tau_h: float = 0.05
    perturb_eps: float = 0.01
    use_trend_terms: bool = True
    loop_check_steps: int = 120  # 0 disables the closed-loop memory check
    loop_growth_tol: float = 0.1
    levels: dict[int, LevelConfig] = field(default_factory=default_levels)

    # stable-error branch
    use_stable: bool = True
    stable_lambda: float = 0.6
    stable_tau: float = 0.10
    stable_k: int = 2
    stable_lr: float = 0.1
    stable_iters: int = 25

    # stream / evaluation
    latency: int = 12
    seed: int = 0
    eps_reg: float = 1e-8
    mape_guard: float = 1e-6
    recovery_mae: tuple[float, float, float] = (0.10, 0.10, 0.10)
    recovery_horizon: int = 150

    def __post_init__(self):
        self.branches = tuple(self.branches)
        self.recovery_mae = tuple(float(v) for v in self.recovery_mae)
        self.validate()

    def validate(self) -> None:
        positive_ints = ("window", "n_targets", "channels", "short_kernel", "long_kernel",
                         "offline_size", "batch_size", "offline_epochs", "offline_patience",
                         "queue_capacity", "agg_len", "detect_window", "seq_len", "n_ft",
                         "n_buf", "stable_k", "stable_iters", "recovery_horizon")
        for name in positive_ints:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.short_kernel % 2 == 0 or self.long_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd for 'same' padding")
        if not 1 <= self.agg_len <= self.queue_capacity:
            raise ConfigError("agg_len must satisfy 1 <= agg_len <= queue_capacity")
        if not set(self.branches) <= {"short", "long"} or not self.branches:
            raise ConfigError(f"branches must be a non-empty subset of short/long, got {self.branches}")
        if not (self.lambda_mild < self.lambda_mod < self.lambda_sev):
            raise ConfigError("thresholds must satisfy lambda_mild < lambda_mod < lambda_sev")
        if self.loop_check_steps < 0 or self.loop_growth_tol <= 0:
            raise ConfigError("loop_check_steps must be >= 0 and loop_growth_tol > 0")
        if self.cooldown < 0 or self.n_init < 0 or self.latency < 0:
            raise ConfigError("cooldown, n_init and latency must be >= 0")
        if not 0 < self.stable_lambda <= 1:
            raise ConfigError("stable_lambda must lie in (0, 1]")
        if not 0 < self.offline_val_split < 1:
            raise ConfigError("offline_val_split must lie in (0, 1)")
        if self.base_lr <= 0 or self.stable_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.tau_h < 0 or self.perturb_eps < 0 or self.eps_reg <= 0:
            raise ConfigError("tau_h, perturb_eps must be >= 0 and eps_reg > 0")
        if len(self.recovery_mae) != 3:
            raise ConfigError("recovery_mae needs one threshold per severity level")
        if set(self.levels) != {1, 2, 3}:
            raise ConfigError("levels must define severities 1, 2 and 3")

    @property
    def thresholds(self) -> tuple[float, float, float]:
        return (self.lambda_mild, self.lambda_mod, self.lambda_sev)

    @property
    def bandwidth(self) -> float:
        return math.sqrt(self.channels / 2)

    def level(self, d: int) -> LevelConfig:
        return self.levels[d]

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "levels":
                continue
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        for d, lc in sorted(self.levels.items()):
            for f in dataclasses.fields(lc):
                if f.name != "level":
                    out[f"level{d}.{f.name}"] = getattr(lc, f.name)
        return out


def _parse_value(text: str) -> Any:
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    if lowered in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if "," in text:
            return [_parse_value(part) for part in text.split(",")]
        return text


def config_from_mapping(values: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Build a config from flat keys (``level2.patience`` style for level recipes)."""
    base = base or RunConfig()
    top: dict[str, Any] = {}
    level_updates: dict[int, dict[str, Any]] = {}
    names = {f.name: f for f in dataclasses.fields(RunConfig)}
    level_fields = {f.name for f in dataclasses.fields(LevelConfig)} - {"level"}
    for key, value in values.items():
        if key.startswith("level") and "." in key:
            head, sub = key.split(".", 1)
            try:
                d = int(head[len("level"):])
            except ValueError:
                raise ConfigError(f"unknown config key {key!r}") from None
            if d not in (1, 2, 3) or sub not in level_fields:
                raise ConfigError(f"unknown config key {key!r}")
            level_updates.setdefault(d, {})[sub] = value
        elif key in names and key != "levels":
            top[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for key, value in list(top.items()):
        current = getattr(base, key)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key} expects a boolean")
        elif isinstance(current, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise ConfigError(f"{key} expects an integer")
            top[key] = int(value)
        elif isinstance(current, float):
            top[key] = float(value)
        elif isinstance(current, tuple):
            top[key] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
    levels = dict(base.levels)
    for d, upd in level_updates.items():
        levels[d] = dataclasses.replace(levels[d], **upd)
    try:
        return dataclasses.replace(base, levels=levels, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = _parse_value(value)
    return config_from_mapping(values, base)


def apply_ablation(cfg: RunConfig, name: str) -> RunConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    if name == "full":
        return cfg
    if name == "no_memory":
        return cfg.replace(use_memory=False)
    if name == "no_drift":
        return cfg.replace(use_drift=False)
    if name == "no_stable":
        return cfg.replace(use_stable=False)
    if name == "static":
        return cfg.replace(use_drift=False, use_stable=False)
    if name == "mse_only":
        return cfg.replace(use_trend_terms=False)
    if name == "short_only":
        return cfg.replace(branches=("short",))
    return cfg.replace(branches=("long",))
