"""Non-attention layers: 3D convolution, spatial max pooling, dropout,
dense, and global spatial pooling.

Convolution is cross-correlation (no kernel flip) with stride 1; "same"
padding requires odd kernel extents. Downsampling happens only through
(1,2,2) max pooling.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels as K
from .autodiff import (
    ShapeError,
    Tensor,
    _from_op,
    add,
    leaky_relu,
    mul,
    relu,
    reduce_mean,
    sigmoid,
    tanh,
)

LEAKY_ALPHA = 0.1

_ACTIVATIONS = {
    "leaky_relu": lambda x: leaky_relu(x, LEAKY_ALPHA),
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
}


def apply_activation(x: Tensor, activation: str | None) -> Tensor:
    if activation is None:
        return x
    try:
        return _ACTIVATIONS[activation](x)
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def conv3d_raw(x: Tensor, kernel: Tensor, padding: str) -> Tensor:
    """Cross-correlation primitive over (B,T,H,W,Cin) with (kT,kH,kW,Cin,Cout)."""
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects rank-5 input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[-1] != kernel.shape[3]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    out = K.conv3d_forward(x.data, kernel.data, padding)

    def backward(g):
        gx = K.conv3d_grad_input(g, kernel.data, padding, x.shape) if x.requires_grad else None
        gk = K.conv3d_grad_kernel(x.data, g, kernel.shape, padding) if kernel.requires_grad else None
        return gx, gk

    return _from_op(out, (x, kernel), backward, "conv3d")


class Conv3DLayer:
    """3x3x3-style convolution with bias and an optional activation tag."""

    def __init__(self, cin: int, cout: int, ksize=(3, 3, 3), padding: str = "same",
                 activation: str | None = None, *, rng: np.random.Generator, dtype=np.float32):
        kt, kh, kw = ksize
        if padding == "same" and (kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0):
            raise ValueError(f"same padding requires odd kernel extents, got {ksize}")
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        fan_in = kt * kh * kw * cin
        fan_out = kt * kh * kw * cout
        self.kernel = glorot_uniform((kt, kh, kw, cin, cout), fan_in, fan_out, rng, dtype)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.padding = padding
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self)

    def params(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}


def conv3d(x: Tensor, layer: Conv3DLayer) -> Tensor:
    out = add(conv3d_raw(x, layer.kernel, layer.padding), layer.bias)
    return apply_activation(out, layer.activation)


def maxpool3d(x: Tensor) -> Tensor:
    """(1,2,2) window and stride; halves H and W. Gradient routes to the
    first-index argmax of each window."""
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects rank-5 input, got {x.shape}")
    out, idx = K.maxpool3d_forward(x.data)

    def backward(g):
        return (K.maxpool3d_backward(g, idx, x.shape),)

    return _from_op(out, (x,), backward, "maxpool3d")


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: training zeroes with probability `rate` and scales
    survivors by 1/(1-rate); inference is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    mask = Tensor(keep / (1.0 - rate), dtype=x.data.dtype)
    return mul(x, mask)


class DenseLayer:
    def __init__(self, n_in: int, n_out: int, activation: str | None = None, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.weight = glorot_uniform((n_in, n_out), n_in, n_out, rng, dtype)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def dense(x: Tensor, layer: DenseLayer) -> Tensor:
    if x.shape[-1] != layer.weight.shape[0]:
        raise ShapeError(f"dense: input extent {x.shape} incompatible with weight {layer.weight.shape}")
    out = add(x @ layer.weight, layer.bias)
    return apply_activation(out, layer.activation)


def global_spatial_pool(x: Tensor) -> Tensor:
    """(B,T,H,W,C) -> (B,T,C) mean over height and width."""
    if x.ndim != 5:
        raise ShapeError(f"global_spatial_pool expects rank-5 input, got {x.shape}")
    return reduce_mean(x, axes=(2, 3))
