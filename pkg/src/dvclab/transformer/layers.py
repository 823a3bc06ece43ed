"""Building blocks: positional encoding, scaled dot-product and multi-head
attention, position-wise feed-forward nets, layer norm, embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Module, Parameter, Tensor


@dataclass
class TransformerConfig:
    d_model: int = 128
    num_heads: int = 4
    num_layers: int = 2
    d_ffn: int = 256
    dropout_rate: float = 0.1
    max_len: int = 64
    smoothing: float = 0.1

    def __post_init__(self):
        if min(self.d_model, self.num_heads, self.num_layers, self.d_ffn, self.max_len) < 1:
            raise ValueError("all transformer dimensions must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads


class FullyMaskedError(ValueError):
    """A query row has no attendable key."""


def positional_encoding(n: int, d_model: int) -> np.ndarray:
    """Sine/cosine position table, shape (n, d_model).

    Column 2i holds sin(pos / 10000^(2i/d_model)) and column 2i+1 the cosine
    at the same frequency, so row 0 alternates 0, 1, 0, 1, ...
    """
    if n < 1 or d_model < 1:
        raise ValueError("n and d_model must be >= 1")
    pos = np.arange(n, dtype=np.float64)[:, None]
    cols = np.arange(d_model)
    freq_exp = (cols // 2 * 2) / d_model
    angles = pos / np.power(10000.0, freq_exp)[None, :]
    pe = np.empty((n, d_model))
    pe[:, 0::2] = np.sin(angles[:, 0::2])
    pe[:, 1::2] = np.cos(angles[:, 1::2])
    return pe


def _mask_penalty(mask: np.ndarray, rows: int, cols: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    mask = np.broadcast_to(mask, mask.shape[:-2] + (rows, cols)) if mask.ndim >= 2 else mask
    if mask.all(axis=-1).any():
        raise FullyMaskedError("a query row masks out every key")
    return np.where(mask, -np.inf, 0.0)


def attention_with_weights(q, k, v, mask=None):
    """Scaled dot-product attention; returns (output, softmax weights).

    ``mask`` is boolean with True marking key positions a query must NOT
    attend; masked logits become -inf so their weights are exactly zero.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("K and V must have equal row counts")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("Q and K must share the inner dimension")
    d_k = k.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, axes)), 1.0 / np.sqrt(d_k))
    if mask is not None:
        penalty = _mask_penalty(mask, q.shape[-2], k.shape[-2])
        scores = ad.add(scores, Tensor(penalty))
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v), weights


def attention(q, k, v, mask=None) -> Tensor:
    out, _ = attention_with_weights(q, k, v, mask)
    return out


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.w = Parameter(ad.xavier_uniform(rng, d_in, d_out))
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        out = ad.matmul(ad.as_tensor(x), self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out


class Embedding(Module):
    def __init__(self, vocab_size: int, d_model: int, rng: np.random.Generator):
        self.table = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(vocab_size, d_model)))

    def __call__(self, ids) -> Tensor:
        return ad.take_rows(self.table, ids)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        mu = ad.tmean(x, axis=-1, keepdims=True)
        centered = ad.add(x, ad.mul(mu, -1.0))
        var = ad.tmean(ad.mul(centered, centered), axis=-1, keepdims=True)
        normed = ad.div(centered, ad.sqrt(ad.add(var, self.eps)))
        return ad.add(ad.mul(normed, self.gamma), self.beta)


class MultiHeadAttention(Module):
    """h parallel scaled dot-product heads, concatenated and projected by W^0."""

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator):
        if d_model % num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        self.num_heads = num_heads
        self.d_k = d_model // num_heads
        self.w_q = Parameter(ad.xavier_uniform(rng, d_model, d_model))
        self.w_k = Parameter(ad.xavier_uniform(rng, d_model, d_model))
        self.w_v = Parameter(ad.xavier_uniform(rng, d_model, d_model))
        self.w_o = Parameter(ad.xavier_uniform(rng, d_model, d_model))

    def _split(self, x: Tensor, n: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (n, self.num_heads, self.d_k)), (1, 0, 2))

    def __call__(self, q, k, v, mask=None) -> Tensor:
        q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
        nq, nk = q.shape[0], k.shape[0]
        qh = self._split(ad.matmul(q, self.w_q), nq)
        kh = self._split(ad.matmul(k, self.w_k), nk)
        vh = self._split(ad.matmul(v, self.w_v), nk)
        out = attention(qh, kh, vh, mask=mask)
        merged = ad.reshape(ad.transpose(out, (1, 0, 2)), (nq, self.num_heads * self.d_k))
        return ad.matmul(merged, self.w_o)


class FeedForward(Module):
    """Two linear maps with a ReLU between: max(0, x W1 + b1) W2 + b2."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.w1 = Parameter(ad.xavier_uniform(rng, d_in, d_hidden))
        self.b1 = Parameter(np.zeros(d_hidden))
        self.w2 = Parameter(ad.xavier_uniform(rng, d_hidden, d_out))
        self.b2 = Parameter(np.zeros(d_out))

    def __call__(self, x) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(ad.as_tensor(x), self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask blocking attention to strictly later positions."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)
