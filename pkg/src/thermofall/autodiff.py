"""Dense tensors with reverse-mode automatic differentiation.

The activation layout used throughout the engine is (B, T, H, W, C):
batch, frames, height, width, channels. Convolution weights are stored
as (kT, kH, kW, Cin, Cout).

Every operation validates that its output is finite; NaN/Inf raises
NonFiniteError instead of propagating silently. Reductions accumulate
in 64-bit regardless of storage dtype.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_ALLOWED_DTYPES = (np.float32, np.float64)


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends graph recording; forward passes inside
    allocate no closures and free intermediates eagerly."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class ShapeError(ValueError):
    """Raised when operand shapes cannot be reconciled."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional array node in a dynamically built computation graph.

    Leaf tensors created with requires_grad=True accumulate gradients in
    .grad after backward(). Intermediate nodes carry closures that map the
    incoming gradient to gradients for their parents; inference-only graphs
    (no differentiable leaves) record nothing.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 0 and min(arr.shape) == 0:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other, self)))

    def __rsub__(self, other):
        return add(_coerce(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar root.

        Visits each recorded node exactly once in reverse topological order
        and accumulates gradients into the .grad of differentiable leaves.
        """
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar root, got shape {self.shape}")
        order: list[Tensor] = []
        seen = {id(self)}
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, idx = stack.pop()
            if idx < len(node._parents):
                stack.append((node, idx + 1))
                parent = node._parents[idx]
                if id(parent) not in seen and parent.requires_grad:
                    seen.add(id(parent))
                    stack.append((parent, 0))
            else:
                order.append(node)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# -- broadcasting helpers ----------------------------------------------------


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    ra, rb = len(a), len(b)
    rank = max(ra, rb)
    pa = (1,) * (rank - ra) + a
    pb = (1,) * (rank - rb) + b
    out = []
    for da, db in zip(pa, pb):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"{op}: shapes {a} and {b} are not broadcastable")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


def _require_same_dtype(x: Tensor, y: Tensor, op: str) -> None:
    if x.data.dtype != y.data.dtype:
        raise TypeError(f"{op}: dtype mismatch {x.data.dtype} vs {y.data.dtype}")


# -- elementwise operations ---------------------------------------------------


def add(x: Tensor, y: Tensor) -> Tensor:
    _require_same_dtype(x, y, "add")
    _broadcast_shape(x.shape, y.shape, "add")
    out = x.data + y.data

    def backward(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _from_op(out, (x, y), backward, "add")


def mul(x: Tensor, y: Tensor) -> Tensor:
    _require_same_dtype(x, y, "mul")
    _broadcast_shape(x.shape, y.shape, "mul")
    out = x.data * y.data

    def backward(g):
        gx = _unbroadcast(g * y.data, x.shape) if x.requires_grad else None
        gy = _unbroadcast(g * x.data, y.shape) if y.requires_grad else None
        return gx, gy

    return _from_op(out, (x, y), backward, "mul")


def neg(x: Tensor) -> Tensor:
    return _from_op(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _from_op(x.data * s, (x,), lambda g: (g * s,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _from_op(out, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _from_op(out, (x,), backward, "tanh")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _from_op(out, (x,), backward, "relu")


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    d = x.data
    out = np.where(d >= 0, d, d * alpha)

    def backward(g):
        return (g * np.where(d >= 0, 1.0, alpha).astype(d.dtype),)

    return _from_op(out, (x,), backward, "leaky_relu")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _from_op(out, (x,), backward, "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _from_op(out, (x,), backward, "clamp")


# -- reductions ----------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} invalid for rank {ndim}")
        norm.append(a % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(norm))


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    out = x.data.sum(axis=ax, dtype=np.float64, keepdims=keepdims).astype(x.data.dtype)
    out = np.asarray(out)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gk, x.shape).astype(x.data.dtype),)

    return _from_op(out, (x,), backward, "reduce_sum")


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    n = 1
    for a in ax:
        n *= x.shape[a]
    out = (x.data.sum(axis=ax, dtype=np.float64, keepdims=keepdims) / n).astype(x.data.dtype)
    out = np.asarray(out)
    inv = 1.0 / n

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gk * inv, x.shape).astype(x.data.dtype),)

    return _from_op(out, (x,), backward, "reduce_mean")


def softmax(x: Tensor, axes) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=ax, dtype=np.float64, keepdims=True)
    out = (e / denom).astype(x.data.dtype)

    def backward(g):
        inner = (g * out).sum(axis=ax, dtype=np.float64, keepdims=True).astype(x.data.dtype)
        return (out * (g - inner),)

    return _from_op(out, (x,), backward, "softmax")


# -- shape operations ----------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _from_op(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {x.ndim}")
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _from_op(out, (x,), backward, "transpose")


def flip(x: Tensor, axis: int) -> Tensor:
    out = np.flip(x.data, axis=axis).copy()

    def backward(g):
        return (np.flip(g, axis=axis).copy(),)

    return _from_op(out, (x,), backward, "flip")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(a, b)
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return _from_op(out, tensors, backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = np.ascontiguousarray(x.data[sl])

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        gx[sl] = g
        return (gx,)

    return _from_op(out, (x,), backward, "narrow")


def split(x: Tensor, parts: int, axis: int) -> list[Tensor]:
    extent = x.shape[axis]
    if extent % parts != 0:
        raise ShapeError(f"axis {axis} extent {extent} not divisible into {parts} parts")
    step = extent // parts
    return [narrow(x, axis, i * step, step) for i in range(parts)]


def matmul(x: Tensor, y: Tensor) -> Tensor:
    _require_same_dtype(x, y, "matmul")
    xd, yd = x.data, y.data
    if xd.ndim < 2 or yd.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2, got {x.shape} and {y.shape}")
    if xd.shape[-1] != yd.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {x.shape} @ {y.shape}")

    if yd.ndim == 2:
        out = xd @ yd

        def backward(g):
            gx = g @ yd.T if x.requires_grad else None
            gy = None
            if y.requires_grad:
                k = xd.shape[-1]
                m = yd.shape[-1]
                gy = xd.reshape(-1, k).T @ g.reshape(-1, m)
            return gx, gy

        return _from_op(out, (x, y), backward, "matmul")

    if xd.ndim == yd.ndim and xd.shape[:-2] == yd.shape[:-2]:
        out = xd @ yd

        def backward(g):
            gx = g @ yd.swapaxes(-1, -2) if x.requires_grad else None
            gy = xd.swapaxes(-1, -2) @ g if y.requires_grad else None
            return gx, gy

        return _from_op(out, (x, y), backward, "matmul")

    raise ShapeError(f"unsupported matmul operand ranks: {x.shape} @ {y.shape}")


# -- verification ---------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in the dtype of x; callers use 64-bit inputs. The scalar output of
    f is differentiated analytically, then each input element is perturbed
    by +/- eps and compared against the central difference.
    """
    probe = Tensor(x.data.copy(), dtype=x.data.dtype, requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: function value not finite")
    out.backward()
    analytic = probe.grad
    if analytic is None:
        analytic = np.zeros_like(probe.data)

    worst = 0.0
    flat = probe.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(probe.data.copy(), dtype=x.data.dtype)).item()
        flat[i] = orig - eps
        lo = f(Tensor(probe.data.copy(), dtype=x.data.dtype)).item()
        flat[i] = orig
        fd = (hi - lo) / (2.0 * eps)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst


def grad_check_entries(
    f: Callable[[], Tensor],
    param: Tensor,
    indices: Iterable[tuple[int, ...]],
    eps: float = 1e-5,
    analytic: np.ndarray | None = None,
) -> float:
    """grad_check restricted to chosen entries of one parameter tensor.

    f() re-evaluates the scalar loss with the parameter's current data;
    analytic is the full gradient for the parameter (computed by one prior
    backward pass) or None to compute it here.
    """
    if analytic is None:
        out = f()
        out.backward()
        analytic = param.grad
        param.grad = None
    worst = 0.0
    for idx in indices:
        orig = param.data[idx]
        param.data[idx] = orig + eps
        hi = f().item()
        param.data[idx] = orig - eps
        lo = f().item()
        param.data[idx] = orig
        fd = (hi - lo) / (2.0 * eps)
        a = float(analytic[idx])
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst
