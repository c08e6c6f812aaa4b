"""Neural layer primitives shared by the reference encoder and the backbone.

Each layer owns its parameter Tensors and exposes them through
`named_params()`, which prefixes names so a whole model flattens into a
single ordered {name: Tensor} mapping for the optimizer and checkpoints.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from .numerics import Tensor


class Layer:
    """Base: children are discovered from attributes, in definition order."""

    def named_params(self, prefix: str = ""):
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}" if not prefix else f"{prefix}.{attr}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Layer):
                yield from value.named_params(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_params(f"{name}.{i}")

    def params(self):
        return [p for _, p in self.named_params()]


class Linear(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 std: float | None = None):
        std = std if std is not None else 1.0 / math.sqrt(in_dim)
        self.weight = nm.randn((in_dim, out_dim), rng, std=std, requires_grad=True)
        self.bias = nm.zeros((1, out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return nm.matmul(x, self.weight) + self.bias
        # [B, L, C]: fold batch and length for the 2-D product
        b, l, c = x.shape
        flat = nm.reshape(x, (b * l, c))
        out = nm.matmul(flat, self.weight) + self.bias
        return nm.reshape(out, (b, l, self.weight.shape[1]))


class LayerNorm(Layer):
    """Normalizes the last axis; eps inside the sqrt keeps grads finite."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = nm.ones((1, dim), requires_grad=True)
        self.shift = nm.zeros((1, dim), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = nm.tmean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = nm.tmean(centered * centered, axis=-1, keepdims=True)
        normed = centered / nm.sqrt(var + self._eps)
        return normed * self.gain + self.shift


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; the tape differentiates the composition
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + nm.tanh(c * (x + 0.044715 * x * x * x)))


class Mlp(Layer):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc_in = Linear(dim, hidden, rng)
        self.fc_out = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc_out(gelu(self.fc_in(x)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, L, C] -> [B*heads, L, C/heads]."""
    b, l, c = x.shape
    d = c // heads
    x = nm.reshape(x, (b, l, heads, d))
    x = nm.transpose(x, (0, 2, 1, 3))
    return nm.reshape(x, (b * heads, l, d))


def _merge_heads(x: Tensor, heads: int) -> Tensor:
    bh, l, d = x.shape
    b = bh // heads
    x = nm.reshape(x, (b, heads, l, d))
    x = nm.transpose(x, (0, 2, 1, 3))
    return nm.reshape(x, (b, l, heads * d))


class MultiHeadAttention(Layer):
    """Scaled dot-product attention; query and key/value sources may differ.

    `key_mask` (bool [B, S], True = attend) supports padded conditioning
    sequences; masked positions get a large negative score pre-softmax.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise nm.DimensionError(f"dim {dim} not divisible by heads {heads}")
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self._heads = heads
        self._scale = 1.0 / math.sqrt(dim // heads)

    def __call__(self, query: Tensor, kv: Tensor,
                 key_mask: np.ndarray | None = None) -> Tensor:
        squeeze = query.ndim == 2
        if squeeze:
            query = nm.reshape(query, (1,) + query.shape)
            kv = nm.reshape(kv, (1,) + kv.shape)
        h = self._heads
        q = _split_heads(self.wq(query), h)
        k = _split_heads(self.wk(kv), h)
        v = _split_heads(self.wv(kv), h)
        scores = nm.matmul(q, nm.transpose(k, (0, 2, 1))) * self._scale
        if key_mask is not None:
            bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e9)
            bias = np.repeat(bias[:, None, :], h, axis=0).reshape(
                scores.shape[0], 1, scores.shape[2])
            scores = scores + Tensor(bias.astype(scores.dtype))
        attn = nm.softmax(scores)
        out = self.wo(_merge_heads(nm.matmul(attn, v), h))
        if squeeze:
            out = nm.reshape(out, out.shape[1:])
        return out


def sinusoidal_table(length: int, dim: int, base: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos position table [length, dim] (not learnable)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(base, 2.0 * idx / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table
