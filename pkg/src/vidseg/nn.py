"""Parameterized building blocks shared by the tracker and refiner.

Every block exposes ``params(prefix)`` returning a flat name->Tensor dict;
checkpoints, freezing, and the optimizer all work on those dicts.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def set_requires_grad(params: dict[str, Tensor], flag: bool) -> None:
    for t in params.values():
        t.requires_grad = flag


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def load_values(params: dict[str, Tensor], table: dict[str, np.ndarray]) -> None:
    """Assign stored arrays into an already-constructed parameter dict."""
    missing = set(params) - set(table)
    extra = set(table) - set(params)
    if missing or extra:
        raise KeyError(f"parameter table mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, t in params.items():
        arr = np.asarray(table[name], dtype=np.float64)
        if arr.shape != t.shape:
            raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
        t.data = arr.copy()


class Linear:
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, zero: bool = False):
        if zero:
            w = np.zeros((c_in, c_out))
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(c_in), size=(c_in, c_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, c: int):
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


class MultiHeadAttention:
    """Multi-head attention over row-stacked token matrices.

    Accepts (n, c) inputs or stacked (b, n, c) inputs; heads split the
    channel axis. ``zero_out`` zeroes the output projection so the
    surrounding residual block starts as the identity.
    """

    def __init__(self, rng: np.random.Generator, channels: int, heads: int, zero_out: bool = False):
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.channels = channels
        self.head_dim = channels // heads
        self.wq = Linear(rng, channels, channels)
        self.wk = Linear(rng, channels, channels)
        self.wv = Linear(rng, channels, channels)
        self.wo = Linear(rng, channels, channels, zero=zero_out)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        if q.shape[-1] != self.channels or k.shape != v.shape or k.shape[-1] != self.channels:
            raise ad.ShapeMismatchError("mha", q.shape, k.shape, v.shape)
        squeeze = q.ndim == 2
        if squeeze:
            q = ad.reshape(q, (1,) + q.shape)
            k = ad.reshape(k, (1,) + k.shape)
            v = ad.reshape(v, (1,) + v.shape)
        b, n, c = q.shape
        m = k.shape[1]
        h, d = self.heads, self.head_dim

        def split(t: Tensor, rows: int) -> Tensor:
            t = ad.reshape(t, (b, rows, h, d))
            return ad.transpose(t, (0, 2, 1, 3))  # (b, h, rows, d)

        qh = split(self.wq(q), n)
        kh = split(self.wk(k), m)
        vh = split(self.wv(v), m)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, vh)  # (b, h, n, d)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, c))
        out = self.wo(ctx)
        if squeeze:
            out = ad.reshape(out, (n, c))
        return out

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(lin.params(f"{prefix}.{name}"))
        return out


class FeedForward:
    def __init__(self, rng: np.random.Generator, channels: int, hidden: int, zero_out: bool = False):
        self.lin1 = Linear(rng, channels, hidden)
        self.lin2 = Linear(rng, hidden, channels, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.relu(self.lin1(x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.lin1.params(f"{prefix}.lin1"), **self.lin2.params(f"{prefix}.lin2")}


class Conv1d:
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 3, zero: bool = False):
        if zero:
            w = np.zeros((kernel, c_in, c_out))
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(kernel * c_in), size=(kernel, c_in, c_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.w, self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def sinusoidal_encoding(length: int, channels: int) -> np.ndarray:
    """Fixed sin/cos positions, one row per timestep."""
    position = np.arange(length)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, channels, 2) * (-math.log(10000.0) / channels))
    enc = np.zeros((length, channels))
    enc[:, 0::2] = np.sin(position * div)
    enc[:, 1::2] = np.cos(position * div[: channels // 2])
    return enc
