"""Transformer building blocks: attention, feed-forward, encoder/decoder.

The attention here differs from the textbook block in one deliberate way:
self-attention adds the projected values V to the softmax-weighted sum
inside the head, so the residual rides the value stream rather than the
layer input. Cross-attention (different query and memory lengths) instead
takes the usual residual on the query stream, applied by the decoder layer.

Layers are pre-norm: each sub-block normalizes its input first. With the
feed-forward second matrix and bias at zero, a layer therefore returns its
attention sub-block output unchanged, which the wiring tests rely on.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ConfigError
from .tensor import ContractError, ShapeError, Tensor


def fan_in_uniform(rng, fan_in, shape, name=None):
    """Uniform init with 1/sqrt(fan_in) bounds."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name=None):
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def small_normal(rng, shape, name=None, sigma=0.02):
    """Init for learned queries and positional embeddings."""
    return Tensor(rng.normal(0.0, sigma, size=shape), requires_grad=True, name=name)


def _swap_last(t):
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return T.transpose(t, axes)


def scaled_dot_attention(q, k, v, scale, mask=None, residual=None, return_weights=False):
    """softmax(q kᵀ · scale) v, optionally plus v.

    ``residual=None`` applies the value residual exactly when the query and
    key sequences have equal length (the self-attention case); cross
    attention passes False explicitly. ``mask`` is a constant additive
    array broadcastable over the logits (large negative entries silence
    pairs).
    """
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: key length {k.shape} != value length {v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query width {q.shape} != key width {k.shape}")
    if residual is None:
        residual = q.shape[-2] == k.shape[-2]
    logits = T.scale(T.matmul(q, _swap_last(k)), scale)
    if mask is not None:
        logits = T.add_mask(logits, mask)
    weights = T.softmax(logits, axis=-1)
    out = T.matmul(weights, v)
    if residual:
        out = out + v
    return (out, weights) if return_weights else out


class MultiHeadAttention:
    """Per-head projections of width D/heads, concatenated, then W_o."""

    def __init__(self, rng, dim, heads, name="mha"):
        if dim % heads != 0:
            raise ConfigError(f"{name}: width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.name = name
        self.w_q = fan_in_uniform(rng, dim, (dim, dim), f"{name}.w_q")
        self.w_k = fan_in_uniform(rng, dim, (dim, dim), f"{name}.w_k")
        self.w_v = fan_in_uniform(rng, dim, (dim, dim), f"{name}.w_v")
        self.w_o = fan_in_uniform(rng, dim, (dim, dim), f"{name}.w_o")

    def _split_heads(self, x):
        # [..., L, D] -> [..., heads, L, head_dim]
        lead = x.shape[:-2]
        L = x.shape[-2]
        x = T.reshape(x, lead + (L, self.heads, self.head_dim))
        n = x.ndim
        axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
        return T.transpose(x, axes)

    def _merge_heads(self, x):
        lead = x.shape[:-3]
        L = x.shape[-2]
        n = x.ndim
        axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
        return T.reshape(T.transpose(x, axes), lead + (L, self.dim))

    def __call__(self, query, key, value, mask=None, residual=None, return_weights=False):
        if query.shape[-1] != self.dim:
            raise ShapeError(f"{self.name}: expected width {self.dim}, got {query.shape}")
        q = self._split_heads(T.matmul(query, self.w_q))
        k = self._split_heads(T.matmul(key, self.w_k))
        v = self._split_heads(T.matmul(value, self.w_v))
        scale = 1.0 / np.sqrt(self.head_dim)
        out = scaled_dot_attention(q, k, v, scale, mask=mask, residual=residual,
                                   return_weights=return_weights)
        if return_weights:
            out, weights = out
        merged = T.matmul(self._merge_heads(out), self.w_o)
        return (merged, weights) if return_weights else merged

    def params(self):
        return {f"{self.name}.w_q": self.w_q, f"{self.name}.w_k": self.w_k,
                f"{self.name}.w_v": self.w_v, f"{self.name}.w_o": self.w_o}


class FeedForward:
    def __init__(self, rng, dim, hidden=None, name="ffn"):
        hidden = 4 * dim if hidden is None else hidden
        self.name = name
        self.w1 = fan_in_uniform(rng, dim, (dim, hidden), f"{name}.w1")
        self.b1 = zeros_param(hidden, f"{name}.b1")
        self.w2 = fan_in_uniform(rng, hidden, (hidden, dim), f"{name}.w2")
        self.b2 = zeros_param(dim, f"{name}.b2")

    def __call__(self, x):
        return T.matmul(T.relu(T.matmul(x, self.w1) + self.b1), self.w2) + self.b2

    def params(self):
        return {f"{self.name}.w1": self.w1, f"{self.name}.b1": self.b1,
                f"{self.name}.w2": self.w2, f"{self.name}.b2": self.b2}


class LayerNorm:
    def __init__(self, dim, name="norm", eps=1e-5):
        self.name = name
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gamma")
        self.beta = zeros_param(dim, f"{name}.beta")

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}


class Linear:
    def __init__(self, rng, d_in, d_out, name="linear"):
        self.name = name
        self.w = fan_in_uniform(rng, d_in, (d_in, d_out), f"{name}.w")
        self.b = zeros_param(d_out, f"{name}.b")

    def __call__(self, x):
        return T.matmul(x, self.w) + self.b

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


def _maybe_drop(x, rate, train, rng):
    if train and rate > 0.0:
        return T.dropout(x, rate, rng=rng)
    return x


class EncoderLayer:
    """Pre-norm self-attention (value-residual form) followed by FFN.

    The attention stage is split into ``norm_attn`` + ``finish_attention``
    so callers that cluster on the normalized queries can compute masks and
    extra additive context from the same normalized tokens the attention
    consumes, without running the normalization twice.
    """

    def __init__(self, rng, dim, heads, dropout=0.0, name="enc"):
        self.name = name
        self.rate = dropout
        self.norm_attn = LayerNorm(dim, f"{name}.norm_attn")
        self.attn = MultiHeadAttention(rng, dim, heads, f"{name}.attn")
        self.norm_ffn = LayerNorm(dim, f"{name}.norm_ffn")
        self.ffn = FeedForward(rng, dim, name=f"{name}.ffn")

    def finish_attention(self, normed, mask=None, extra=None, train=False, rng=None):
        a = self.attn(normed, normed, normed, mask=mask, residual=True)
        if extra is not None:
            a = a + extra
        return _maybe_drop(a, self.rate, train, rng)

    def ffn_sublayer(self, a, train=False, rng=None):
        return a + _maybe_drop(self.ffn(self.norm_ffn(a)), self.rate, train, rng)

    def __call__(self, x, mask=None, train=False, rng=None):
        a = self.finish_attention(self.norm_attn(x), mask=mask, train=train, rng=rng)
        return self.ffn_sublayer(a, train=train, rng=rng)

    def params(self):
        out = {}
        for part in (self.norm_attn, self.attn, self.norm_ffn, self.ffn):
            out.update(part.params())
        return out


class DecoderLayer:
    """Cross-attention of a query stream over memory, then FFN.

    Self-attention over the query stream is off by default and enabled by
    flag; when on, it uses the same value-residual form as the encoder.
    Cross-attention takes its residual on the query stream.
    """

    def __init__(self, rng, dim, heads, dropout=0.0, self_attention=False, name="dec"):
        self.name = name
        self.rate = dropout
        if self_attention:
            self.norm_self = LayerNorm(dim, f"{name}.norm_self")
            self.self_attn = MultiHeadAttention(rng, dim, heads, f"{name}.self_attn")
        else:
            self.norm_self = None
            self.self_attn = None
        self.norm_query = LayerNorm(dim, f"{name}.norm_query")
        self.cross = MultiHeadAttention(rng, dim, heads, f"{name}.cross")
        self.norm_ffn = LayerNorm(dim, f"{name}.norm_ffn")
        self.ffn = FeedForward(rng, dim, name=f"{name}.ffn")

    def __call__(self, queries, memory, train=False, rng=None):
        if memory.shape[-2] == 0:
            raise ContractError(f"{self.name}: empty memory")
        x = queries
        if self.self_attn is not None:
            h = self.norm_self(x)
            x = _maybe_drop(self.self_attn(h, h, h, residual=True), self.rate, train, rng)
        c = self.cross(self.norm_query(x), memory, memory, residual=False)
        x = x + _maybe_drop(c, self.rate, train, rng)
        return x + _maybe_drop(self.ffn(self.norm_ffn(x)), self.rate, train, rng)

    def params(self):
        parts = [self.norm_query, self.cross, self.norm_ffn, self.ffn]
        if self.self_attn is not None:
            parts = [self.norm_self, self.self_attn] + parts
        out = {}
        for part in parts:
            out.update(part.params())
        return out
