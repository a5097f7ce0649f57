"""Numpy reference kernels: 3D cross-correlation and 2x2 spatial max pooling.

Convolution is evaluated as chunked im2col + GEMM so peak scratch memory
stays bounded even at full 256x256 frame resolution. The input gradient is
a full correlation with the flipped, channel-transposed kernel, which
reuses the same forward path.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_COL_BYTES = 256 * 1024 * 1024


def _pad_same(x: np.ndarray, kt: int, kh: int, kw: int) -> np.ndarray:
    pt, ph, pw = (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    if pt == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))


def _out_extents(xp_shape, kt, kh, kw):
    _, tp, hp, wp, _ = xp_shape
    return tp - kt + 1, hp - kh + 1, wp - kw + 1


def _t_chunk(ho: int, wo: int, kt: int, kh: int, kw: int, ci: int, itemsize: int) -> int:
    per_t = ho * wo * kt * kh * kw * ci * itemsize
    return max(1, MAX_COL_BYTES // max(per_t, 1))


def _cols_for(xs: np.ndarray, kt: int, kh: int, kw: int, t0: int, t1: int) -> np.ndarray:
    # rows for output frames [t0, t1) of one sample; copy is the im2col buffer
    win = sliding_window_view(xs[t0 : t1 + kt - 1], (kt, kh, kw), axis=(0, 1, 2))
    to, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 6, 3).reshape(to * ho * wo, kt * kh * kw * xs.shape[-1])
    return np.ascontiguousarray(cols)


def conv3d_forward(x: np.ndarray, kernel: np.ndarray, padding: str) -> np.ndarray:
    kt, kh, kw, ci, co = kernel.shape
    if x.shape[-1] != ci:
        raise ValueError(f"conv3d: input channels {x.shape[-1]} != kernel Cin {ci}")
    xp = _pad_same(x, kt, kh, kw) if padding == "same" else x
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
            cols = _cols_for(xp[i], kt, kh, kw, t0, t1)
            out[i, t0:t1] = (cols @ kmat).reshape(t1 - t0, ho, wo, co)
    return out


def conv3d_grad_kernel(x: np.ndarray, grad_out: np.ndarray, kernel_shape, padding: str) -> np.ndarray:
    kt, kh, kw, ci, co = kernel_shape
    xp = _pad_same(x, kt, kh, kw) if padding == "same" else x
    b, to, ho, wo, _ = grad_out.shape
    dk = np.zeros((kt * kh * kw * ci, co), dtype=x.dtype)
    step = _t_chunk(ho, wo, kt, kh, kw, ci, x.dtype.itemsize)
    for i in range(b):
        for t0 in range(0, to, step):
            t1 = min(t0 + step, to)
            cols = _cols_for(xp[i], kt, kh, kw, t0, t1)
            dk += cols.T @ grad_out[i, t0:t1].reshape(-1, co)
    return dk.reshape(kernel_shape)


def conv3d_grad_input(grad_out: np.ndarray, kernel: np.ndarray, padding: str, x_shape) -> np.ndarray:
    kt, kh, kw, ci, co = kernel.shape
    kflip = np.ascontiguousarray(kernel[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
    gp = np.pad(grad_out, ((0, 0), (kt - 1, kt - 1), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    dxp = conv3d_forward(gp, kflip, "valid")
    if padding == "same":
        pt, ph, pw = (kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
        t, h, w = x_shape[1:4]
        dxp = np.ascontiguousarray(dxp[:, pt : pt + t, ph : ph + h, pw : pw + w, :])
    return dxp


def maxpool3d_forward(x: np.ndarray):
    b, t, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool3d: spatial extents ({h}, {w}) not divisible by 2")
    r = x.reshape(b, t, h // 2, 2, w // 2, 2, c).transpose(0, 1, 2, 4, 3, 5, 6)
    r = r.reshape(b, t, h // 2, w // 2, 4, c)
    idx = r.argmax(axis=4)
    out = np.take_along_axis(r, idx[:, :, :, :, None, :], axis=4)[:, :, :, :, 0, :]
    return np.ascontiguousarray(out), idx.astype(np.int8)


def maxpool3d_backward(grad_out: np.ndarray, idx: np.ndarray, x_shape) -> np.ndarray:
    b, t, h, w, c = x_shape
    buf = np.zeros((b, t, h // 2, w // 2, 4, c), dtype=grad_out.dtype)
    np.put_along_axis(buf, idx[:, :, :, :, None, :].astype(np.intp), grad_out[:, :, :, :, None, :], axis=4)
    return buf.reshape(b, t, h // 2, w // 2, 2, 2, c).transpose(0, 1, 2, 4, 3, 5, 6).reshape(b, t, h, w, c)
