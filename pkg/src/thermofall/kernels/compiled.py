"""Kernel API backed by the Cython core.

Shares the padding/chunking logic with the reference backend; only the
buffer transforms (im2col/col2im) and pooling loops run in compiled code.
The input gradient uses a direct col2im scatter instead of the reference
backend's second convolution pass.
"""
from __future__ import annotations

import numpy as np

from . import _fastcore
from .reference import MAX_COL_BYTES, _out_extents, _pad_same, _t_chunk


def conv3d_forward(x: np.ndarray, kernel: np.ndarray, padding: str) -> np.ndarray:
    kt, kh, kw, ci, co = kernel.shape
    if x.shape[-1] != ci:
        raise ValueError(f"conv3d: input channels {x.shape[-1]} != kernel Cin {ci}")
    xp = _pad_same(x, kt, kh, kw) if padding == "same" else x
    xp = np.ascontiguousarray(xp)
    to, ho, wo = _out_extents(xp.shape, kt, kh, kw)
    if min(to, ho, wo) < 1:
        raise ValueError(f"conv3d: kernel {kernel.shape[:3]} larger than input {x.shape[1:4]}")
    b = x.shape[0]
    kmat = kernel.reshape(-1, co)
    out = np.empty((b, to, ho, wo, co), dtype=x.dtype)
    step = _t_chunk(ho, wo, kt, kh, kw, ci, x.dtype.itemsize)
    for i in range(b):
        for t0 in range(0, to, step):
            t1 = min(t0 + step, to)
            cols = np.empty(((t1 - t0) * ho * wo, kt * kh * kw * ci), dtype=x.dtype)
            _fastcore.im2col(xp[i], kt, kh, kw, t0, t1, cols)
            out[i, t0:t1] = (cols @ kmat).reshape(t1 - t0, ho, wo, co)
    return out


def conv3d_grad_kernel(x: np.ndarray, grad_out: np.ndarray, kernel_shape, padding: str) -> np.ndarray:
    kt, kh, kw, ci, co = kernel_shape
    xp = _pad_same(x, kt, kh, kw) if padding == "same" else x
    xp = np.ascontiguousarray(xp)
    b, to, ho, wo, _ = grad_out.shape
    dk = np.zeros((kt * kh * kw * ci, co), dtype=x.dtype)
    step = _t_chunk(ho, wo, kt, kh, kw, ci, x.dtype.itemsize)
    for i in range(b):
        for t0 in range(0, to, step):
            t1 = min(t0 + step, to)
            cols = np.empty(((t1 - t0) * ho * wo, kt * kh * kw * ci), dtype=x.dtype)
            _fastcore.im2col(xp[i], kt, kh, kw, t0, t1, cols)
            dk += cols.T @ grad_out[i, t0:t1].reshape(-1, co)
    return dk.reshape(kernel_shape)


def conv3d_grad_input(grad_out: np.ndarray, kernel: np.ndarray, padding: str, x_shape) -> np.ndarray:
    kt, kh, kw, ci, co = kernel.shape
    b, t, h, w, _ = x_shape
    if padding == "same":
        pt, ph, pw = (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
        xp_shape = (t + 2 * pt, h + 2 * ph, w + 2 * pw, ci)
    else:
        pt = ph = pw = 0
        xp_shape = (t, h, w, ci)
    to, ho, wo = grad_out.shape[1:4]
    kmat_t = np.ascontiguousarray(kernel.reshape(-1, co).T)
    dx = np.empty((b, t, h, w, ci), dtype=grad_out.dtype)
    step = _t_chunk(ho, wo, kt, kh, kw, ci, grad_out.dtype.itemsize)
    for i in range(b):
        dxp = np.zeros(xp_shape, dtype=grad_out.dtype)
        for t0 in range(0, to, step):
            t1 = min(t0 + step, to)
            dcols = np.ascontiguousarray(grad_out[i, t0:t1].reshape(-1, co) @ kmat_t)
            _fastcore.col2im(dcols, kt, kh, kw, t0, t1, dxp)
        dx[i] = dxp[pt : pt + t, ph : ph + h, pw : pw + w, :]
    return dx


def maxpool3d_forward(x: np.ndarray):
    b, t, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool3d: spatial extents ({h}, {w}) not divisible by 2")
    x = np.ascontiguousarray(x)
    out = np.empty((b, t, h // 2, w // 2, c), dtype=x.dtype)
    idx = np.empty((b, t, h // 2, w // 2, c), dtype=np.int8)
    _fastcore.maxpool_forward(x, out, idx)
    return out, idx


def maxpool3d_backward(grad_out: np.ndarray, idx: np.ndarray, x_shape) -> np.ndarray:
    dx = np.zeros(x_shape, dtype=grad_out.dtype)
    _fastcore.maxpool_backward(np.ascontiguousarray(grad_out), idx, dx)
    return dx
