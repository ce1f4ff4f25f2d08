"""Differentiable layers on numpy arrays.

Each layer keeps what it needs from ``forward`` for ``backward``; parameter
gradients are written into ``layer.grads`` (overwritten, not accumulated).
"""

from __future__ import annotations

import math

import numpy as np
import scipy.fft as sfft


def he_uniform(rng, shape, fan_in, dtype):
    lim = math.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError


class MultiBranchConv(Layer):
    """Parallel same-padded 2-D convolutions with different square kernels.

    All branches read the full input volume; their outputs are concatenated
    along the channel axis in branch order. Implemented as one FFT
    correlation with every kernel embedded centrally in the largest one.
    Only parameter gradients are produced (this is always the input layer).
    """

    kind = "conv"

    def __init__(self, in_channels, kernel_sizes, n_filters, rng, dtype=np.float32):
        super().__init__()
        self.kernel_sizes = tuple(kernel_sizes)
        self.n_filters = n_filters
        self.in_channels = in_channels
        self.kmax = max(self.kernel_sizes)
        for k in self.kernel_sizes:
            if k % 2 == 0:
                raise ValueError("kernel sizes must be odd")
            self.params[f"conv{k}.w"] = he_uniform(
                rng, (n_filters, in_channels, k, k), in_channels * k * k, dtype)
            self.params[f"conv{k}.b"] = np.zeros(n_filters, dtype=dtype)
        self._cache = None

    @property
    def out_channels(self):
        return self.n_filters * len(self.kernel_sizes)

    def _full_kernel(self):
        K = self.kmax
        dtype = self.params[f"conv{self.kernel_sizes[0]}.w"].dtype
        w = np.zeros((self.out_channels, self.in_channels, K, K), dtype=dtype)
        for bi, k in enumerate(self.kernel_sizes):
            o = (K - k) // 2
            w[bi * self.n_filters:(bi + 1) * self.n_filters, :, o:o + k, o:o + k] = self.params[f"conv{k}.w"]
        return w

    def _bias(self):
        return np.concatenate([self.params[f"conv{k}.b"] for k in self.kernel_sizes])

    def forward(self, x, train=False):
        B, C, H, W = x.shape
        if C != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {C}")
        K = self.kmax
        P = K // 2
        shape = (sfft.next_fast_len(H + K - 1, True), sfft.next_fast_len(W + K - 1, True))
        X = sfft.rfft2(x, s=shape)
        Wf = sfft.rfft2(self._full_kernel()[:, :, ::-1, ::-1], s=shape)
        F = X.shape[-2] * X.shape[-1]
        Yf = np.einsum("bcf,ocf->bof", X.reshape(B, C, F), Wf.reshape(self.out_channels, C, F))
        y = sfft.irfft2(Yf.reshape(B, self.out_channels, *X.shape[-2:]), s=shape)
        y = y[:, :, P:P + H, P:P + W] + self._bias()[None, :, None, None]
        self._cache = (X, shape, (H, W))
        return y.astype(x.dtype, copy=False)

    def backward(self, g):
        X, shape, (H, W) = self._cache
        B = g.shape[0]
        K = self.kmax
        P = K // 2
        G = sfft.rfft2(g, s=shape)
        F = G.shape[-2] * G.shape[-1]
        R = np.einsum("bof,bcf->ocf", np.conj(G.reshape(B, self.out_channels, F)),
                      X.reshape(B, self.in_channels, F))
        r = sfft.irfft2(R.reshape(self.out_channels, self.in_channels, *G.shape[-2:]), s=shape)
        lags = np.arange(-P, P + 1)
        dw = r[:, :, lags[:, None] % shape[0], lags[None, :] % shape[1]]
        gb = g.sum(axis=(0, 2, 3))
        for bi, k in enumerate(self.kernel_sizes):
            o = (K - k) // 2
            sl = slice(bi * self.n_filters, (bi + 1) * self.n_filters)
            wdt = self.params[f"conv{k}.w"].dtype
            self.grads[f"conv{k}.w"] = dw[sl, :, o:o + k, o:o + k].astype(wdt)
            self.grads[f"conv{k}.b"] = gb[sl].astype(wdt)
        return None


class ChannelMaxPool(Layer):
    """Max over non-overlapping channel pairs (pool window 2 x 1 x 1)."""

    kind = "pool"

    def __init__(self, size=2):
        super().__init__()
        self.size = size

    def forward(self, x, train=False):
        B, C, H, W = x.shape
        if C % self.size:
            raise ValueError("channel count must be divisible by the pool size")
        xr = x.reshape(B, C // self.size, self.size, H, W)
        idx = xr.argmax(axis=2)
        self._cache = (idx, x.shape)
        return np.take_along_axis(xr, idx[:, :, None], axis=2)[:, :, 0]

    def backward(self, g):
        idx, shape = self._cache
        B, C, H, W = shape
        out = np.zeros((B, C // self.size, self.size, H, W), dtype=g.dtype)
        np.put_along_axis(out, idx[:, :, None], g[:, :, None], axis=2)
        return out.reshape(shape)


class ToTokens(Layer):
    """(B, C, H, T) -> (B, T, C*H): one token per time column."""

    kind = "reshape"

    def forward(self, x, train=False):
        self._shape = x.shape
        B, C, H, T = x.shape
        return x.transpose(0, 3, 1, 2).reshape(B, T, C * H)

    def backward(self, g):
        B, C, H, T = self._shape
        return g.reshape(B, T, C, H).transpose(0, 2, 3, 1)


def softmax(s, axis=-1):
    e = s - s.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


class MultiHeadAttention(Layer):
    """Scaled dot-product self-attention over tokens.

    Heads are concatenated and projected back to the token width, then added
    to the input tokens (residual path), so per-position features survive
    even when attention is close to uniform.
    """

    kind = "attention"

    def __init__(self, d_model, heads, d_k, d_v, rng, dtype=np.float32):
        super().__init__()
        self.heads, self.d_k, self.d_v = heads, d_k, d_v
        self.params["att.wq"] = he_uniform(rng, (d_model, heads * d_k), d_model, dtype)
        self.params["att.wk"] = he_uniform(rng, (d_model, heads * d_k), d_model, dtype)
        self.params["att.wv"] = he_uniform(rng, (d_model, heads * d_v), d_model, dtype)
        self.params["att.wo"] = he_uniform(rng, (heads * d_v, d_model), heads * d_v, dtype)
        self.last_weights = None

    def _split(self, z, d):
        B, T, _ = z.shape
        return z.reshape(B, T, self.heads, d).transpose(0, 2, 1, 3)

    def forward(self, x, train=False):
        B, T, D = x.shape
        q = self._split(x @ self.params["att.wq"], self.d_k)
        k = self._split(x @ self.params["att.wk"], self.d_k)
        v = self._split(x @ self.params["att.wv"], self.d_v)
        scale = 1.0 / math.sqrt(self.d_k)
        s = q @ k.transpose(0, 1, 3, 2)
        s *= scale
        a = softmax(s)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(B * T, self.heads * self.d_v)
        self._cache = (x, q, k, v, a, scale, o)
        self.last_weights = a
        return x + (o @ self.params["att.wo"]).reshape(B, T, D)

    def backward(self, g):
        x, q, k, v, a, scale, o = self._cache
        B, T, D = x.shape
        gf = g.reshape(B * T, D)
        self.grads["att.wo"] = o.T @ gf
        go = (gf @ self.params["att.wo"].T).reshape(B, T, self.heads, self.d_v).transpose(0, 2, 1, 3)
        da = go @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ go
        rowdot = np.einsum("bhts,bhts->bht", da, a)[..., None]
        da -= rowdot
        da *= a
        ds = da
        dq = ds @ k * scale
        dk = ds.transpose(0, 1, 3, 2) @ q * scale

        def merge(z):
            return z.transpose(0, 2, 1, 3).reshape(B * T, -1)

        xf = x.reshape(B * T, D)
        dqm, dkm, dvm = merge(dq), merge(dk), merge(dv)
        self.grads["att.wq"] = xf.T @ dqm
        self.grads["att.wk"] = xf.T @ dkm
        self.grads["att.wv"] = xf.T @ dvm
        dx = dqm @ self.params["att.wq"].T + dkm @ self.params["att.wk"].T + dvm @ self.params["att.wv"].T
        return g + dx.reshape(B, T, D)


class Flatten(Layer):
    kind = "reshape"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._shape)


class Dropout(Layer):
    """Inverted dropout; identity at inference."""

    kind = "dropout"

    def __init__(self, rate, rng):
        super().__init__()
        self.rate = rate
        self.rng = rng
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.rate <= 0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, g):
        return g if self._mask is None else g * self._mask


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng, dtype=np.float32, name="dense", zero_init=False):
        super().__init__()
        self.name = name
        w = np.zeros((n_in, n_out), dtype=dtype) if zero_init else he_uniform(rng, (n_in, n_out), n_in, dtype)
        self.params[f"{name}.w"] = w
        self.params[f"{name}.b"] = np.zeros(n_out, dtype=dtype)

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params[f"{self.name}.w"] + self.params[f"{self.name}.b"]

    def backward(self, g):
        self.grads[f"{self.name}.w"] = self._x.T @ g
        self.grads[f"{self.name}.b"] = g.sum(axis=0)
        return g @ self.params[f"{self.name}.w"].T


class ReLU(Layer):
    kind = "activation"

    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask


class Sigmoid(Layer):
    kind = "activation"

    def forward(self, x, train=False):
        self._y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self._y

    def backward(self, g):
        return g * self._y * (1.0 - self._y)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    idx = np.arange(n)
    loss = -np.mean(logp[idx, labels])
    g = np.exp(logp)
    g[idx, labels] -= 1.0
    return float(loss), (g / n).astype(logits.dtype, copy=False)


def mse(pred, target):
    d = pred - target
    return float(np.mean(d**2)), 2.0 * d / d.size
