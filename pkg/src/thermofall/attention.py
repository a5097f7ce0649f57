"""Five attention mechanisms over (B,T,H,W,C) feature maps.

Spatial and temporal attention are parameter-free sigmoid gates built from
means over complementary axes. Feature attention is a squeeze-excitation
gate with a reduction ratio. Self-attention is multi-head scaled dot
product over all T*H*W positions. General attention softmax-pools the
positions into a single (B,C) vector.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    concat,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    sigmoid,
    softmax,
    tanh,
    transpose,
)
from .layers import glorot_uniform, relu


def spatial_attention(x: Tensor) -> Tensor:
    """Gate each (h,w) position by the sigmoid of its mean over frames and
    channels; highlights consistently active spatial regions."""
    _want_rank5(x, "spatial_attention")
    gate = sigmoid(reduce_mean(x, axes=(1, 4), keepdims=True))
    return mul(gate, x)


def temporal_attention(x: Tensor) -> Tensor:
    """Gate each (t,c) slice by the sigmoid of its spatial mean; emphasizes
    frames whose feature maps are globally active."""
    _want_rank5(x, "temporal_attention")
    gate = sigmoid(reduce_mean(x, axes=(2, 3), keepdims=True))
    return mul(gate, x)


class FeatureAttentionParams:
    """Squeeze-excitation channel gate: C -> C/r -> C with ReLU then sigmoid."""

    def __init__(self, channels: int, reduction: int = 32, *, rng: np.random.Generator,
                 dtype=np.float32):
        if channels % reduction != 0:
            raise ValueError(f"reduction {reduction} does not divide channel count {channels}")
        hidden = channels // reduction
        self.reduction = reduction
        self.w_reduce = glorot_uniform((channels, hidden), channels, hidden, rng, dtype)
        self.b_reduce = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w_restore = glorot_uniform((hidden, channels), hidden, channels, rng, dtype)
        self.b_restore = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {
            "w_reduce": self.w_reduce,
            "b_reduce": self.b_reduce,
            "w_restore": self.w_restore,
            "b_restore": self.b_restore,
        }


def feature_attention(x: Tensor, p: FeatureAttentionParams) -> Tensor:
    _want_rank5(x, "feature_attention")
    b, _, _, _, c = x.shape
    z = reduce_mean(x, axes=(1, 2, 3))
    hidden = relu(add(matmul(z, p.w_reduce), p.b_reduce))
    gate = sigmoid(add(matmul(hidden, p.w_restore), p.b_restore))
    return mul(x, reshape(gate, (b, 1, 1, 1, c)))


class SelfAttentionParams:
    """Multi-head projections: per head C -> d_k for Q, K, V, then a joint
    output projection h*d_k -> C."""

    def __init__(self, channels: int, heads: int = 2, key_dim: int = 128, *,
                 rng: np.random.Generator, dtype=np.float32):
        if heads < 1:
            raise ValueError(f"head count must be >= 1, got {heads}")
        self.heads = heads
        self.key_dim = key_dim
        wide = heads * key_dim
        self.w_query = glorot_uniform((channels, wide), channels, wide, rng, dtype)
        self.w_key = glorot_uniform((channels, wide), channels, wide, rng, dtype)
        self.w_value = glorot_uniform((channels, wide), channels, wide, rng, dtype)
        self.w_out = glorot_uniform((wide, channels), wide, channels, rng, dtype)

    def params(self) -> dict[str, Tensor]:
        return {
            "w_query": self.w_query,
            "w_key": self.w_key,
            "w_value": self.w_value,
            "w_out": self.w_out,
        }


def self_attention(x: Tensor, p: SelfAttentionParams) -> Tensor:
    _want_rank5(x, "self_attention")
    b, t, h, w, c = x.shape
    n = t * h * w
    dk = p.key_dim

    def heads(weight: Tensor) -> Tensor:
        proj = matmul(reshape(x, (b, n, c)), weight)
        return transpose(reshape(proj, (b, n, p.heads, dk)), (0, 2, 1, 3))

    q = heads(p.w_query)
    k = heads(p.w_key)
    v = heads(p.w_value)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    attn = softmax(scores, axes=(3,))
    ctx = matmul(attn, v)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, p.heads * dk))
    out = matmul(merged, p.w_out)
    return reshape(out, (b, t, h, w, c))


class GeneralAttentionParams:
    """Scoring vector W (C,1) and scalar bias for softmax position pooling."""

    def __init__(self, channels: int, *, rng: np.random.Generator, dtype=np.float32):
        self.w = glorot_uniform((channels, 1), channels, 1, rng, dtype)
        self.b = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


def general_attention(x: Tensor, p: GeneralAttentionParams) -> Tensor:
    """Softmax(tanh(xW + b))-weighted sum over every position, jointly over
    (t,h,w) for rank-5 input or over t for already-pooled (B,T,C) input.
    Returns a (B,C) summary; weights per batch item sum to 1."""
    if x.ndim == 5:
        b, t, h, w, c = x.shape
        flat = reshape(x, (b, t * h * w, c))
    elif x.ndim == 3:
        flat = x
        b, _, c = x.shape
    else:
        raise ShapeError(f"general_attention expects rank 3 or 5 input, got {x.shape}")
    scores = tanh(add(matmul(flat, p.w), p.b))
    weights = softmax(scores, axes=(1,))
    return reduce_sum(mul(weights, flat), axes=(1,))


def _want_rank5(x: Tensor, op: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{op} expects (B,T,H,W,C) input, got {x.shape}")
