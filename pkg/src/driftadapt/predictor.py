"""Dual-branch temporal-convolution regressor with analytic gradients and AdamW.

Data layout is time-major: a batch of windows is ``(B, L, F)`` and hidden maps are
``(B, L, C)``. Every parameter belongs to one of six groups that the freezing
logic works with.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .memory import context_weights, sigmoid

GROUPS = ("projection", "lower", "upper", "head", "memory", "gate")

GROUP_OF = {
    "W_p": "projection", "b_p": "projection",
    "Ws1": "lower", "bs1": "lower", "Wl1": "lower", "bl1": "lower",
    "Ws2": "upper", "bs2": "upper", "Wl2": "upper", "bl2": "upper",
    "W_h": "head", "b_h": "head",
    "W_m": "memory", "b_m": "memory",
    "W_g": "gate", "b_g": "gate",
}

CHECKPOINT_VERSION = 1


@dataclass
class Batch:
    """Model inputs for B samples.

    ``x`` holds the normalized feature windows (B, L, F). ``hist`` holds the
    pooled backbone features of the L + R - 1 steps preceding each window's
    last column (B, S, 2C); ``valid`` marks which history slots exist.
    """

    x: np.ndarray
    hist: np.ndarray
    valid: np.ndarray
    y: np.ndarray | None = None
    t: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)

    def take(self, idx) -> "Batch":
        return Batch(self.x[idx], self.hist[idx], self.valid[idx],
                     None if self.y is None else self.y[idx],
                     None if self.t is None else self.t[idx])

    @staticmethod
    def concat(parts: list["Batch"]) -> "Batch":
        has_y = all(p.y is not None for p in parts)
        has_t = all(p.t is not None for p in parts)
        return Batch(np.concatenate([p.x for p in parts]),
                     np.concatenate([p.hist for p in parts]),
                     np.concatenate([p.valid for p in parts]),
                     np.concatenate([p.y for p in parts]) if has_y else None,
                     np.concatenate([p.t for p in parts]) if has_t else None)


@dataclass(frozen=True)
class FreezeMask:
    trainable: frozenset[str]

    def __post_init__(self):
        unknown = set(self.trainable) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")

    def is_trainable(self, group: str) -> bool:
        return group in self.trainable

    @classmethod
    def all(cls) -> "FreezeMask":
        return cls(frozenset(GROUPS))

    @classmethod
    def none(cls) -> "FreezeMask":
        return cls(frozenset())


def set_trainable(level: int | str) -> FreezeMask:
    """Freeze mask for a drift level (1, 2, 3) or the stable-error branch.

    Level 2 opens the upper convolution layers together with the gated fusion
    and memory projection, which are trained as part of that tier.
    """
    if level in (1, "stable"):
        return FreezeMask(frozenset({"head"}))
    if level == 2:
        return FreezeMask(frozenset({"head", "upper", "gate", "memory"}))
    if level == 3:
        return FreezeMask.all()
    raise ValueError(f"unknown adaptation level {level!r}")


def _conv_forward(x, W, b):
    B, L, cin = x.shape
    cout, _, k = W.shape
    p = k // 2
    xp = np.zeros((B, L + 2 * p, cin))
    xp[:, p:p + L] = x
    # im2col with (tap, channel) ordering; the tap loop is cheaper than a strided copy
    cols = np.empty((B, L, k, cin))
    for kk in range(k):
        cols[:, :, kk] = xp[:, kk:kk + L]
    cols = cols.reshape(B * L, k * cin)
    Wr = W.transpose(0, 2, 1).reshape(cout, k * cin)
    return (cols @ Wr.T).reshape(B, L, cout) + b, cols


def _conv_backward(dout, cols, W, x_shape):
    B, L, cin = x_shape
    cout, _, k = W.shape
    p = k // 2
    d2 = dout.reshape(B * L, cout)
    dW = (d2.T @ cols).reshape(cout, k, cin).transpose(0, 2, 1)
    db = d2.sum(axis=0)
    dcols = (d2 @ W.transpose(0, 2, 1).reshape(cout, k * cin)).reshape(B, L, k, cin)
    dxp = np.zeros((B, L + 2 * p, cin))
    for kk in range(k):
        dxp[:, kk:kk + L] += dcols[:, :, kk]
    return dW, db, dxp[:, p:p + L]


def conv1d_same(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Single-window temporal convolution. ``x`` is (C_in, L), ``W`` is (C_out, C_in, k)."""
    out, _ = _conv_forward(np.asarray(x, float).T[None], W, b)
    return out[0].T


class Predictor:
    def __init__(self, n_features: int, n_targets: int, window: int = 12, channels: int = 32,
                 short_kernel: int = 3, long_kernel: int = 7, agg_len: int = 4,
                 use_memory: bool = True, branches=("short", "long"), seed: int = 0):
        self.n_features = n_features
        self.n_targets = n_targets
        self.window = window
        self.channels = channels
        self.short_kernel = short_kernel
        self.long_kernel = long_kernel
        self.agg_len = agg_len
        self.use_memory = use_memory
        self.branches = tuple(branches)
        self.seed = seed
        self.params = self._init_params(np.random.default_rng(seed))

    @classmethod
    def from_config(cls, cfg, n_features: int, n_targets: int, seed: int | None = None) -> "Predictor":
        return cls(n_features, n_targets, window=cfg.window, channels=cfg.channels,
                   short_kernel=cfg.short_kernel, long_kernel=cfg.long_kernel,
                   agg_len=cfg.agg_len, use_memory=cfg.use_memory, branches=cfg.branches,
                   seed=cfg.seed if seed is None else seed)

    @property
    def pooled_dim(self) -> int:
        return 2 * self.channels

    @property
    def history_len(self) -> int:
        return self.window + self.agg_len - 1

    def _init_params(self, rng) -> dict[str, np.ndarray]:
        C, F, K = self.channels, self.n_features, self.n_targets

        def uni(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        ks, kl = self.short_kernel, self.long_kernel
        return {
            "W_p": uni((C, F), F), "b_p": uni((C,), F),
            "Ws1": uni((C, C, ks), C * ks), "bs1": uni((C,), C * ks),
            "Wl1": uni((C, C, kl), C * kl), "bl1": uni((C,), C * kl),
            "Ws2": uni((C, C, ks), C * ks), "bs2": uni((C,), C * ks),
            "Wl2": uni((C, C, kl), C * kl), "bl2": uni((C,), C * kl),
            "W_h": uni((K, 2 * C), 2 * C), "b_h": uni((K,), 2 * C),
            "W_m": uni((C, 2 * C), 2 * C), "b_m": uni((C,), 2 * C),
            "W_g": uni((C, 2 * C), 2 * C), "b_g": uni((C,), 2 * C),
        }

    # ------------------------------------------------------------------ forward
    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[-1]}")
        return x @ self.params["W_p"].T + self.params["b_p"]

    def memory_item(self, pooled: np.ndarray) -> np.ndarray:
        return np.maximum(pooled @ self.params["W_m"].T + self.params["b_m"], 0.0)

    def forward(self, batch: Batch) -> tuple[np.ndarray, dict[str, Any]]:
        P = self.params
        x = np.asarray(batch.x, dtype=float)
        if x.ndim != 3 or x.shape[1] != self.window or x.shape[2] != self.n_features:
            raise ValueError(f"window batch must be (B, {self.window}, {self.n_features}), got {x.shape}")
        B, L, _ = x.shape
        C = self.channels
        cache: dict[str, Any] = {"x": x, "shape": (B, L, C)}

        z = x @ P["W_p"].T + P["b_p"]
        cache["z"] = z
        if self.use_memory:
            A = context_weights(batch.valid, L, self.agg_len)
            pre_m = batch.hist @ P["W_m"].T + P["b_m"]
            M = np.maximum(pre_m, 0.0)
            ctx = A @ M
            u = np.concatenate([z, ctx], axis=-1)
            g = sigmoid(u @ P["W_g"].T + P["b_g"])
            zt = g * z + (1.0 - g) * ctx
            cache.update(A=A, hist=batch.hist, pre_m=pre_m, ctx=ctx, u=u, g=g)
        else:
            zt = z

        outs = []
        for name, W1, b1, W2, b2 in (("short", "Ws1", "bs1", "Ws2", "bs2"),
                                     ("long", "Wl1", "bl1", "Wl2", "bl2")):
            if name not in self.branches:
                outs.append(np.zeros((B, L, C)))
                continue
            p1, cols1 = _conv_forward(zt, P[W1], P[b1])
            a1 = np.maximum(p1, 0.0)
            p2, cols2 = _conv_forward(a1, P[W2], P[b2])
            a2 = np.maximum(p2, 0.0)
            cache[name] = (p1, cols1, p2, cols2)
            outs.append(a2)
        h = np.concatenate(outs, axis=-1)
        pooled = h.mean(axis=1)
        yhat = pooled @ P["W_h"].T + P["b_h"]
        cache.update(zt=zt, h=h, pooled=pooled)
        return yhat, cache

    def predict(self, batch: Batch) -> np.ndarray:
        return self.forward(batch)[0]

    def preactivations(self, cache: dict[str, Any]) -> list[np.ndarray]:
        """ReLU inputs of a cached pass (used to avoid kinks in gradient checks)."""
        acts = []
        for name in ("short", "long"):
            if name in cache:
                acts.extend([cache[name][0], cache[name][2]])
        if "pre_m" in cache:
            valid = cache["A"].sum(axis=1) > 0
            acts.append(cache["pre_m"][valid])
        return acts

    # ----------------------------------------------------------------- backward
    def backward(self, cache: dict[str, Any], dyhat: np.ndarray,
                 dpooled: np.ndarray | None = None) -> dict[str, np.ndarray]:
        P = self.params
        B, L, C = cache["shape"]
        grads = {k: np.zeros_like(v) for k, v in P.items()}
        dyhat = np.asarray(dyhat, dtype=float)

        grads["W_h"] = dyhat.T @ cache["pooled"]
        grads["b_h"] = dyhat.sum(axis=0)
        dpool = dyhat @ P["W_h"]
        if dpooled is not None:
            dpool = dpool + dpooled
        dh = np.broadcast_to(dpool[:, None, :] / L, (B, L, 2 * C))

        dzt = np.zeros((B, L, C))
        for offset, (name, W1, b1, W2, b2) in enumerate((("short", "Ws1", "bs1", "Ws2", "bs2"),
                                                          ("long", "Wl1", "bl1", "Wl2", "bl2"))):
            if name not in self.branches:
                continue
            p1, cols1, p2, cols2 = cache[name]
            da2 = dh[:, :, offset * C:(offset + 1) * C]
            dp2 = da2 * (p2 > 0)
            grads[W2], grads[b2], da1 = _conv_backward(dp2, cols2, P[W2], (B, L, C))
            dp1 = da1 * (p1 > 0)
            grads[W1], grads[b1], dz_branch = _conv_backward(dp1, cols1, P[W1], (B, L, C))
            dzt += dz_branch

        if self.use_memory:
            g, z, ctx, u = cache["g"], cache["z"], cache["ctx"], cache["u"]
            dz = dzt * g
            dctx = dzt * (1.0 - g)
            da = dzt * (z - ctx) * g * (1.0 - g)
            da2 = da.reshape(B * L, C)
            grads["W_g"] = da2.T @ u.reshape(B * L, 2 * C)
            grads["b_g"] = da2.sum(axis=0)
            du = da @ P["W_g"]
            dz += du[..., :C]
            dctx += du[..., C:]
            dM = np.swapaxes(cache["A"], 1, 2) @ dctx
            dpre = dM * (cache["pre_m"] > 0)
            S = dpre.shape[1]
            grads["W_m"] = dpre.reshape(B * S, C).T @ cache["hist"].reshape(B * S, 2 * C)
            grads["b_m"] = dpre.sum(axis=(0, 1))
        else:
            dz = dzt
        x = cache["x"]
        grads["W_p"] = dz.reshape(B * L, C).T @ x.reshape(B * L, -1)
        grads["b_p"] = dz.sum(axis=(0, 1))
        return grads

    # ------------------------------------------------------------------ helpers
    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for k, v in params.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k] = np.array(v, dtype=float, copy=True)

    def group_digest(self, group: str) -> str:
        return params_digest(self.params, group)

    def architecture(self) -> dict[str, Any]:
        return {"n_features": self.n_features, "n_targets": self.n_targets,
                "window": self.window, "channels": self.channels,
                "short_kernel": self.short_kernel, "long_kernel": self.long_kernel,
                "agg_len": self.agg_len, "use_memory": self.use_memory,
                "branches": list(self.branches), "seed": self.seed}


def params_digest(params: dict[str, np.ndarray], group: str | None = None) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        if group is None or GROUP_OF[name] == group:
            h.update(name.encode())
            h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


class AdamW:
    """AdamW with bias correction, decoupled decay and per-parameter step counters."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01,
                 group_of: dict[str, str] | None = None):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.group_of = GROUP_OF if group_of is None else group_of
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.steps = {k: 0 for k in params}

    @classmethod
    def from_config(cls, cfg, params, lr: float | None = None) -> "AdamW":
        return cls(params, lr=cfg.base_lr if lr is None else lr, beta1=cfg.beta1,
                   beta2=cfg.beta2, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             mask: FreezeMask | None = None, lr_multipliers: dict[str, float] | None = None,
             lr_scale: float = 1.0) -> None:
        """In-place update of every parameter whose group is trainable under ``mask``."""
        for name, p in params.items():
            group = self.group_of[name]
            if mask is not None and not mask.is_trainable(group):
                continue
            lr = self.lr * lr_scale * (lr_multipliers or {}).get(group, 1.0)
            g = grads[name]
            self.steps[name] += 1
            t = self.steps[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1 ** t)
            vhat = self.v[name] / (1 - self.beta2 ** t)
            p *= 1 - lr * self.weight_decay
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
            out[f"adam_step/{k}"] = np.array(self.steps[k], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam_m/{k}"], dtype=float)
            self.v[k] = np.array(arrays[f"adam_v/{k}"], dtype=float)
            self.steps[k] = int(arrays[f"adam_step/{k}"])


def lr_multipliers(lower_multiplier: float) -> dict[str, float]:
    return {"projection": lower_multiplier, "lower": lower_multiplier}


@dataclass
class Checkpoint:
    model: Predictor
    optimizer: AdamW | None = None
    stats: Any = None
    queue_items: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: str | Path, model: Predictor, optimizer: AdamW | None = None,
                    stats=None, queue_items: np.ndarray | None = None,
                    meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {f"param/{k}": v for k, v in model.params.items()}
    header = {"version": CHECKPOINT_VERSION, "architecture": model.architecture(),
              "optimizer": None, "meta": meta or {}}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
        header["optimizer"] = {"lr": optimizer.lr, "beta1": optimizer.beta1,
                               "beta2": optimizer.beta2, "eps": optimizer.eps,
                               "weight_decay": optimizer.weight_decay}
    if stats is not None:
        arrays.update({f"stats/{k}": v for k, v in stats.as_arrays().items()})
    if queue_items is not None:
        arrays["queue/items"] = np.asarray(queue_items, dtype=float)
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    from .ingest import NormStats

    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    header = json.loads(str(arrays["header"]))
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    arch = header["architecture"]
    model = Predictor(arch["n_features"], arch["n_targets"], window=arch["window"],
                      channels=arch["channels"], short_kernel=arch["short_kernel"],
                      long_kernel=arch["long_kernel"], agg_len=arch["agg_len"],
                      use_memory=arch["use_memory"], branches=tuple(arch["branches"]),
                      seed=arch["seed"])
    model.load_params({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = AdamW(model.params, **header["optimizer"])
        optimizer.load_state_arrays(arrays)
    stats = None
    stat_keys = {k[len("stats/"):]: v for k, v in arrays.items() if k.startswith("stats/")}
    if stat_keys:
        stats = NormStats(**stat_keys)
    return Checkpoint(model, optimizer, stats, arrays.get("queue/items"), header["meta"])
