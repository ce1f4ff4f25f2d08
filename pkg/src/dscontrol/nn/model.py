"""Convolution + attention classifier and the participation regressor."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (ChannelMaxPool, Dense, Dropout, Flatten, MultiBranchConv,
                     MultiHeadAttention, ReLU, Sigmoid, ToTokens, softmax,
                     softmax_cross_entropy, mse)


class Network:
    """Ordered stack of layers with a flat parameter namespace."""

    def __init__(self, layers):
        self.layers = layers

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.params)
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.grads)
        return out

    def param_kind(self) -> dict[str, str]:
        return {name: layer.kind for layer in self.layers for name in layer.params}

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        own = self.params()
        for name, arr in values.items():
            if name not in own:
                raise KeyError(f"unknown parameter {name}")
            if own[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {own[name].shape} vs {arr.shape}")
            own[name][...] = arr

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class CnnAttConfig:
    in_channels: int = 5
    rows: int = 270
    cols: int = 250
    kernel_sizes: tuple = (1, 3, 5, 7, 9)
    n_filters: int = 4
    pool: int = 2
    heads: int = 8
    d_k: int = 32
    d_v: int = 32
    dropout: float = 0.2
    n_classes: int = 2
    zero_head: bool = False
    dtype: str = "float32"
    seed: int = 0
    micro_batch: int = 16

    def to_dict(self):
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["kernel_sizes"] = tuple(d["kernel_sizes"])
        return cls(**d)


class CnnAttModel(Network):
    """Multi-kernel convolution, channel max-pool, multi-head attention over
    time columns, dropout, dense softmax head."""

    def __init__(self, cfg: CnnAttConfig | None = None):
        cfg = cfg or CnnAttConfig()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.conv = MultiBranchConv(cfg.in_channels, cfg.kernel_sizes, cfg.n_filters, rng, dtype)
        self.pool = ChannelMaxPool(cfg.pool)
        pooled = self.conv.out_channels // cfg.pool
        self.attention = MultiHeadAttention(pooled * cfg.rows, cfg.heads, cfg.d_k, cfg.d_v, rng, dtype)
        self.dropout = Dropout(cfg.dropout, np.random.default_rng([cfg.seed, 1]))
        self.head = Dense(cfg.cols * pooled * cfg.rows, cfg.n_classes, rng, dtype, name="head",
                          zero_init=cfg.zero_head)
        super().__init__([self.conv, self.pool, ToTokens(), self.attention, Flatten(),
                          self.dropout, self.head])

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def _check(self, x):
        c = self.cfg
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (c.in_channels, c.rows, c.cols):
            raise ValueError(f"expected volume shape {(c.in_channels, c.rows, c.cols)}, got {x.shape[1:]}")
        return x.astype(self.dtype, copy=False)

    def logits(self, x, train=False):
        return self.forward(self._check(x), train=train)

    def predict_proba(self, x) -> np.ndarray:
        """Class probabilities with dropout disabled, in micro-batches."""
        x = self._check(np.asarray(x))
        mb = self.cfg.micro_batch
        out = [softmax(self.forward(x[i:i + mb]).astype(np.float64)) for i in range(0, len(x), mb)]
        return np.concatenate(out)

    def predict(self, x) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)

    def loss_and_grads(self, x, y, train=True):
        logits = self.forward(self._check(x), train=train)
        loss, g = softmax_cross_entropy(logits, np.asarray(y))
        self.backward(g.astype(self.dtype, copy=False))
        return loss

    def attention_weights(self, x) -> np.ndarray:
        self.forward(self._check(x))
        return self.attention.last_weights

    def trainable_after_freeze(self) -> list[str]:
        return [n for n in self.params() if not n.startswith("conv")]


@dataclass
class RegressorConfig:
    n_inputs: int = 543
    hidden: tuple = (300, 300, 250, 250, 200)
    dtype: str = "float64"
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class RegressorModel(Network):
    """Dense ReLU stack with a sigmoid output (participation fraction)."""

    def __init__(self, cfg: RegressorConfig | None = None):
        cfg = cfg or RegressorConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.dtype)
        layers = []
        n_in = cfg.n_inputs
        for i, width in enumerate(cfg.hidden):
            layers += [Dense(n_in, width, rng, dtype, name=f"fc{i}"), ReLU()]
            n_in = width
        # zero output weights: the untrained model predicts sigmoid(out.b) everywhere
        layers += [Dense(n_in, 1, rng, dtype, name="out", zero_init=True), Sigmoid()]
        super().__init__(layers)
        self.x_mean = np.zeros(cfg.n_inputs)
        self.x_scale = np.ones(cfg.n_inputs)

    def _prep(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return ((x - self.x_mean) / self.x_scale).astype(self.cfg.dtype)

    def start_at(self, mean_target: float) -> None:
        """Set the output bias so the untrained model predicts ``mean_target``."""
        p = min(max(float(mean_target), 1e-6), 1 - 1e-6)
        self.params()["out.b"][:] = np.log(p / (1 - p))

    def predict(self, x) -> np.ndarray:
        return self.forward(self._prep(x))[:, 0].astype(np.float64)

    def loss_and_grads(self, x, y, train=True):
        pred = self.forward(self._prep(x), train=train)
        loss, g = mse(pred[:, 0], np.asarray(y, dtype=pred.dtype))
        self.backward(g[:, None])
        return loss


class Adam:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads, names):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for n in names:
            g = grads[n]
            if n not in self.m:
                self.m[n] = np.zeros_like(g)
                self.v[n] = np.zeros_like(g)
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            upd = self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            params[n] -= upd.astype(params[n].dtype, copy=False)
