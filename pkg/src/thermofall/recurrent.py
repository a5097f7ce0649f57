"""ConvLSTM2D cell, sequence unrolling, and the bidirectional wrapper.

Gate order is fixed as (input, forget, cell, output); gate pre-activations
are conv(x_t) + conv(h) + bias with same padding and no peepholes. The
bidirectional form concatenates forward-time and reversed backward-time
hidden sequences along channels, forward half first.
"""
from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, add, concat, flip, mul, narrow, reshape, sigmoid, split, tanh
from .layers import conv3d_raw, glorot_uniform


class ConvLSTMParams:
    """Input-to-gate and hidden-to-gate conv kernels plus gate biases.

    The forget-gate bias starts at `forget_bias` (1 by default) so early
    training does not wash out the cell state; all other biases are zero.
    """

    def __init__(self, cin: int, filters: int, ksize=(3, 3), *, rng: np.random.Generator,
                 dtype=np.float32, forget_bias: float = 1.0):
        kh, kw = ksize
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"ConvLSTM kernel extents must be odd, got {ksize}")
        self.filters = filters
        self.ksize = (kh, kw)
        self.cin = cin
        self.w_x = glorot_uniform((kh, kw, cin, 4 * filters), kh * kw * cin, kh * kw * 4 * filters, rng, dtype)
        self.w_h = glorot_uniform((kh, kw, filters, 4 * filters), kh * kw * filters, kh * kw * 4 * filters, rng, dtype)
        bias = np.zeros(4 * filters, dtype=dtype)
        bias[filters : 2 * filters] = forget_bias
        self.bias = Tensor(bias, requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"w_x": self.w_x, "w_h": self.w_h, "bias": self.bias}


class RecurrentState:
    """Hidden and cell activations, both (B,H,W,F)."""

    def __init__(self, hidden: Tensor, cell: Tensor):
        if hidden.shape != cell.shape:
            raise ShapeError(f"state shapes disagree: {hidden.shape} vs {cell.shape}")
        self.hidden = hidden
        self.cell = cell

    @classmethod
    def zeros(cls, batch: int, height: int, width: int, filters: int, dtype=np.float32):
        shape = (batch, height, width, filters)
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


def _conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    # 2D conv expressed through the 3D kernel with a singleton time axis
    b, h, w, c = x.shape
    kh, kw, ci, co = kernel.shape
    out = conv3d_raw(reshape(x, (b, 1, h, w, c)), reshape(kernel, (1, kh, kw, ci, co)), "same")
    return reshape(out, (b, h, w, co))


def convlstm_step(x_t: Tensor, state: RecurrentState, p: ConvLSTMParams) -> RecurrentState:
    if x_t.shape[1:3] != state.hidden.shape[1:3]:
        raise ShapeError(f"input {x_t.shape} and state {state.hidden.shape} spatial extents disagree")
    pre = add(add(_conv2d(x_t, p.w_x), _conv2d(state.hidden, p.w_h)), p.bias)
    gi, gf, gg, go = split(pre, 4, axis=-1)
    i = sigmoid(gi)
    f = sigmoid(gf)
    g = tanh(gg)
    o = sigmoid(go)
    c_next = add(mul(f, state.cell), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return RecurrentState(h_next, c_next)


def convlstm_sequence(x: Tensor, p: ConvLSTMParams, return_sequence: bool = True) -> Tensor:
    """Unroll over the time axis from a zero initial state.

    Returns (B,T,H,W,F) when return_sequence, else the last hidden (B,H,W,F).
    """
    if x.ndim != 5:
        raise ShapeError(f"convlstm_sequence expects (B,T,H,W,C), got {x.shape}")
    b, t, h, w, _ = x.shape
    if t < 1:
        raise ShapeError("convlstm_sequence requires at least one frame")
    state = RecurrentState.zeros(b, h, w, p.filters, dtype=x.data.dtype)
    outputs = []
    for step in range(t):
        x_t = reshape(narrow(x, 1, step, 1), (b, h, w, x.shape[-1]))
        state = convlstm_step(x_t, state, p)
        if return_sequence:
            outputs.append(reshape(state.hidden, (b, 1, h, w, p.filters)))
    if return_sequence:
        return concat(outputs, axis=1)
    return state.hidden


def biconvlstm(x: Tensor, p_fwd: ConvLSTMParams, p_bwd: ConvLSTMParams) -> Tensor:
    """Forward pass plus time-reversed backward pass, concatenated along
    channels (forward half first); output (B,T,H,W,2F)."""
    if p_fwd.filters != p_bwd.filters or p_fwd.ksize != p_bwd.ksize or p_fwd.cin != p_bwd.cin:
        raise ShapeError("forward and backward ConvLSTM parameter shapes disagree")
    fwd = convlstm_sequence(x, p_fwd, return_sequence=True)
    bwd = flip(convlstm_sequence(flip(x, 1), p_bwd, return_sequence=True), 1)
    return concat([fwd, bwd], axis=-1)
