"""Deterministic n-dimensional arrays with taped reverse-mode differentiation.

Every value in the system is a :class:`Tensor` wrapping a numpy buffer.
Operations record backward closures on a dynamic tape (the graph of
``_parents`` links); ``Tensor.backward`` replays them in reverse
topological order. Gradient accumulation is additive, and the visit
order is fixed by construction order, so repeated runs on identical
inputs produce bit-identical gradients.

Broadcasting is deliberately restricted: elementwise binary operations
require equal shapes or a scalar operand, and anything wider must go
through an explicit :func:`broadcast_to`. This trades convenience for
the elimination of silent shape bugs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NumericalError(ArithmeticError):
    """Raised when an operation produces or receives non-finite values."""


_grad_enabled = True


class no_grad:
    """Context manager disabling tape construction inside its scope."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A real-valued n-dimensional array, optionally attached to the tape.

    Attributes:
        data: the row-major numpy buffer (float32 or float64).
        requires_grad: whether gradients should flow into this tensor.
        grad: accumulated gradient buffer, or None before backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    # -- introspection -------------------------------------------------

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
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- autograd core ---------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor through the recorded tape.

        ``seed`` defaults to 1 and is only optional for single-element
        outputs; non-scalar roots must supply an explicit seed.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed requires a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {self.data.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        _accumulate(self, seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


# -- graph helpers ----------------------------------------------------------


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[Tensor], Callable[[], None]]) -> Tensor:
    """Wrap an op result, attaching a backward closure when the tape is live."""
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward(out)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    if a_t is None and b_t is None:
        raise TypeError("at least one operand must be a Tensor")
    if a_t is None:
        a_t = as_tensor(a, like=b_t)
    if b_t is None:
        b_t = as_tensor(b, like=a_t)
    if a_t.shape != b_t.shape and a_t.size != 1 and b_t.size != 1:
        raise ShapeError(
            f"elementwise op requires equal shapes or a scalar operand, got {a_t.shape} and {b_t.shape}"
        )
    return a_t, b_t


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of scalar/explicit broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")
    return arr


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    data = a.data + b.data

    def backward(out: Tensor):
        def fn():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _reduce_to(g, a.shape))
            if b.requires_grad:
                _accumulate(b, _reduce_to(g, b.shape))
        return fn

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    data = a.data - b.data

    def backward(out: Tensor):
        def fn():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _reduce_to(g, a.shape))
            if b.requires_grad:
                _accumulate(b, _reduce_to(-g, b.shape))
        return fn

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    data = a.data * b.data

    def backward(out: Tensor):
        def fn():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _reduce_to(g * b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _reduce_to(g * a.data, b.shape))
        return fn

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    data = _check_finite(a.data / b.data, "div")

    def backward(out: Tensor):
        def fn():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _reduce_to(g / b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _reduce_to(-g * a.data / (b.data * b.data), b.shape))
        return fn

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                _accumulate(a, -out.grad)
        return fn

    return _make(-a.data, (a,), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("power expects a python scalar exponent")
    p = float(exponent)
    data = _check_finite(a.data ** p, "power")

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad * p * a.data ** (p - 1.0))
        return fn

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = _check_finite(np.exp(a.data), "exp")

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad * out.data)
        return fn

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericalError("log requires strictly positive input")
    data = np.log(a.data)

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad / a.data)
        return fn

    return _make(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericalError("sqrt requires non-negative input")
    data = np.sqrt(a.data)

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad * 0.5 / np.maximum(out.data, np.finfo(out.data.dtype).tiny))
        return fn

    return _make(data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    """|a| with subgradient 0 at 0."""
    data = np.abs(a.data)

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad * np.sign(a.data))
        return fn

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad * out.data * (1.0 - out.data))
        return fn

    return _make(data, (a,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    data = x * cdf

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
                _accumulate(a, out.grad * (cdf + x * pdf))
        return fn

    return _make(data, (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(out: Tensor):
        def fn():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                _accumulate(a, _reduce_to(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accumulate(b, _reduce_to(gb, b.shape))
        return fn

    return _make(data, (a, b), backward)


# -- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                g = out.grad
                if not keepdims:
                    shape = list(a.shape)
                    for ax in axes:
                        shape[ax] = 1
                    g = g.reshape(shape)
                _accumulate(a, np.broadcast_to(g, a.shape).copy())
        return fn

    return _make(data, (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tensor_sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


# -- structural ops -----------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                _accumulate(a, out.grad.reshape(a.shape))
        return fn

    return _make(data, (a,), backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for ndim {a.ndim}")
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                _accumulate(a, np.ascontiguousarray(out.grad.transpose(inverse)))
        return fn

    return _make(data, (a,), backward)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast; the only place non-scalar broadcasting is allowed."""
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from e

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                _accumulate(a, _reduce_to(out.grad, a.shape))
        return fn

    return _make(data, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index].copy()

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[index] = out.grad
                _accumulate(a, g)
        return fn

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(out: Tensor):
        def fn():
            offset = 0
            for t, size in zip(tensors, sizes):
                if t.requires_grad:
                    index = [slice(None)] * out.grad.ndim
                    index[axis] = slice(offset, offset + size)
                    _accumulate(t, out.grad[tuple(index)])
                offset += size
        return fn

    return _make(data, tuple(tensors), backward)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Partition along ``axis`` into contiguous pieces of the given sizes."""
    axis = axis % a.ndim
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis {axis} of {a.shape}")
    parts = []
    offset = 0
    for size in sizes:
        parts.append(narrow(a, axis, offset, size))
        offset += size
    return parts


def pad2d(a: Tensor, pad: tuple[int, int, int, int], mode: str = "zero") -> Tensor:
    """Pad the trailing two dims by (top, bottom, left, right)."""
    top, bottom, left, right = pad
    widths = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    if mode == "zero":
        data = np.pad(a.data, widths, mode="constant")
    elif mode == "reflect":
        data = np.pad(a.data, widths, mode="reflect")
    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    H, W = a.shape[-2], a.shape[-1]

    def backward(out: Tensor):
        def fn():
            if not a.requires_grad:
                return
            g = out.grad
            if mode == "zero":
                index = (Ellipsis, slice(top, top + H), slice(left, left + W))
                _accumulate(a, g[index])
            else:
                # Reflection duplicates interior samples; fold pad gradients back.
                rows = np.pad(np.arange(H), (top, bottom), mode="reflect")
                cols = np.pad(np.arange(W), (left, right), mode="reflect")
                acc = np.zeros_like(a.data)
                flatg = g.reshape(-1, g.shape[-2], g.shape[-1])
                flata = acc.reshape(-1, H, W)
                for i in range(flatg.shape[0]):
                    np.add.at(flata[i], (rows[:, None], cols[None, :]), flatg[i])
                _accumulate(a, acc)
        return fn

    return _make(data, (a,), backward)


def crop2d(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    index = (Ellipsis, slice(top, top + height), slice(left, left + width))
    data = a.data[index].copy()

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[index] = out.grad
                _accumulate(a, g)
        return fn

    return _make(data, (a,), backward)


# -- softmax / layer norm ----------------------------------------------------


def softmax(a: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along ``axis``."""
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(out: Tensor):
        def fn():
            if a.requires_grad:
                g = out.grad
                y = out.data
                dot = (g * y).sum(axis=axis, keepdims=True)
                _accumulate(a, y * (g - dot))
        return fn

    return _make(data, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing dimension to zero mean / unit variance, then affine.

    ``gamma`` and ``beta`` must have shape ``(a.shape[-1],)``; this is the one
    sanctioned trailing-dimension broadcast.
    """
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(out: Tensor):
        def fn():
            g = out.grad
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
            if beta.requires_grad:
                _accumulate(beta, g.reshape(-1, d).sum(axis=0))
            if a.requires_grad:
                gg = g * gamma.data
                m1 = gg.mean(axis=-1, keepdims=True)
                m2 = (gg * xhat).mean(axis=-1, keepdims=True)
                _accumulate(a, inv * (gg - m1 - xhat * m2))
        return fn

    return _make(data, (a, gamma, beta), backward)


# -- convolution --------------------------------------------------------------


def _gather_cols(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [B,C,k,k,Ho,Wo] window gather (copies, row-major)."""
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    return cols


def _scatter_cols(cols: np.ndarray, out_shape: tuple[int, ...], k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_gather_cols`: scatter-add windows back."""
    B, C, _, _, Ho, Wo = cols.shape
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += cols[:, :, i, j]
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation (no kernel flip) with zero padding.

    Shapes: x [B, C_in, H, W], weight [C_out, C_in/groups, k, k] with odd k.
    Output spatial size equals input when stride=1 and padding=k//2.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, Cg, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernels must be square, got {kh}x{kw}")
    k = kh
    if k % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if Cin % groups != 0 or Cout % groups != 0:
        raise ShapeError(f"channels ({Cin} in, {Cout} out) not divisible by groups={groups}")
    if Cg != Cin // groups:
        raise ShapeError(f"weight expects {Cg} channels/group but input provides {Cin // groups}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"bias must have shape ({Cout},), got {bias.shape}")
    if H + 2 * padding < k or W + 2 * padding < k:
        raise ShapeError(f"spatial extent {H}x{W} (pad {padding}) smaller than kernel {k}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (xd.shape[2] - k) // stride + 1
    Wo = (xd.shape[3] - k) // stride + 1
    wr = weight.data.reshape(groups, Cout // groups, Cg * k * k)

    if k == 1 and stride == 1:
        cols = xd.reshape(B, groups, Cg, Ho * Wo)
    else:
        cols = _gather_cols(xd, k, stride).reshape(B, groups, Cg * k * k, Ho * Wo)
    out = np.einsum("gof,bgfl->bgol", wr, cols, optimize=True)
    out = out.reshape(B, Cout, Ho, Wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(outt: Tensor):
        def fn():
            g = outt.grad
            gr = g.reshape(B, groups, Cout // groups, Ho * Wo)
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                gw = np.einsum("bgol,bgfl->gof", gr, cols, optimize=True)
                _accumulate(weight, gw.reshape(weight.shape))
            if x.requires_grad:
                gcols = np.einsum("gof,bgol->bgfl", wr, gr, optimize=True)
                if k == 1 and stride == 1:
                    gx = gcols.reshape(B, Cin, H, W)
                else:
                    gcols = gcols.reshape(B, Cin, k, k, Ho, Wo)
                    gx = _scatter_cols(gcols, (B, Cin, xd.shape[2], xd.shape[3]), k, stride)
                    if padding:
                        gx = gx[:, :, padding : padding + H, padding : padding + W]
                _accumulate(x, gx)
        return fn

    return _make(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution, the adjoint of a stride-``stride`` correlation.

    Shapes: x [B, C_in, H, W], weight [C_in, C_out, k, k]; output spatial
    size is (H-1)*stride + k. With k == stride this is exact zero-overlap
    upsampling (k=2, stride=2 doubles each extent).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, Cin, H, W = x.shape
    Cw, Cout, kh, kw = weight.shape
    if Cw != Cin:
        raise ShapeError(f"weight expects {Cw} input channels, input has {Cin}")
    if kh != kw:
        raise ShapeError(f"conv_transpose2d kernels must be square, got {kh}x{kw}")
    k = kh
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"bias must have shape ({Cout},), got {bias.shape}")
    Ho = (H - 1) * stride + k
    Wo = (W - 1) * stride + k

    cols = np.einsum("iokl,bihw->boklhw", weight.data, x.data, optimize=True)
    out = _scatter_cols(cols.reshape(B, Cout, k, k, H, W), (B, Cout, Ho, Wo), k, stride)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(outt: Tensor):
        def fn():
            g = outt.grad
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            gcols = _gather_cols(g, k, stride)  # [B,Cout,k,k,H,W]
            if weight.requires_grad:
                gw = np.einsum("bihw,boklhw->iokl", x.data, gcols, optimize=True)
                _accumulate(weight, gw)
            if x.requires_grad:
                gx = np.einsum("iokl,boklhw->bihw", weight.data, gcols, optimize=True)
                _accumulate(x, gx)
        return fn

    return _make(out, parents, backward)


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Average pool the trailing two dims down to 1x1."""
    return tensor_mean(x, axis=(-2, -1), keepdims=True)


# -- Fourier ------------------------------------------------------------------

_dft_basis_cache: dict[tuple[int, int, str], tuple[np.ndarray, ...]] = {}


def _dft_bases(H: int, W: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    key = (H, W, np.dtype(dtype).str)
    if key not in _dft_basis_cache:
        wh = W // 2 + 1
        n = np.arange(W)
        l = np.arange(wh)
        ang_w = 2.0 * np.pi * np.outer(l, n) / W
        m = np.arange(H)
        kk = np.arange(H)
        ang_h = 2.0 * np.pi * np.outer(kk, m) / H
        _dft_basis_cache[key] = (
            np.cos(ang_w).astype(dtype),
            np.sin(ang_w).astype(dtype),
            np.cos(ang_h).astype(dtype),
            np.sin(ang_h).astype(dtype),
        )
    return _dft_basis_cache[key]


def rfft2(x: Tensor) -> tuple[Tensor, Tensor]:
    """Unnormalized 2-D DFT of a real signal over the trailing two dims.

    Returns (real, imag) over the half spectrum of width W//2 + 1. The
    transform is evaluated as two dense basis contractions, which keeps it
    exactly linear and differentiable through both outputs.
    """
    if x.ndim < 2:
        raise ShapeError("rfft2 requires at least 2 dimensions")
    H, W = x.shape[-2], x.shape[-1]
    CW, SW, CH, SH = _dft_bases(H, W, x.data.dtype)

    a = np.einsum("...hw,lw->...hl", x.data, CW, optimize=True)
    b = -np.einsum("...hw,lw->...hl", x.data, SW, optimize=True)
    real = np.einsum("...hl,kh->...kl", a, CH, optimize=True) + np.einsum("...hl,kh->...kl", b, SH, optimize=True)
    imag = np.einsum("...hl,kh->...kl", b, CH, optimize=True) - np.einsum("...hl,kh->...kl", a, SH, optimize=True)

    def backward_real(out: Tensor):
        def fn():
            if x.requires_grad:
                g = out.grad
                ga = np.einsum("...kl,kh->...hl", g, CH, optimize=True)
                gb = np.einsum("...kl,kh->...hl", g, SH, optimize=True)
                gx = np.einsum("...hl,lw->...hw", ga, CW, optimize=True)
                gx -= np.einsum("...hl,lw->...hw", gb, SW, optimize=True)
                _accumulate(x, gx)
        return fn

    def backward_imag(out: Tensor):
        def fn():
            if x.requires_grad:
                g = out.grad
                ga = -np.einsum("...kl,kh->...hl", g, SH, optimize=True)
                gb = np.einsum("...kl,kh->...hl", g, CH, optimize=True)
                gx = np.einsum("...hl,lw->...hw", ga, CW, optimize=True)
                gx -= np.einsum("...hl,lw->...hw", gb, SW, optimize=True)
                _accumulate(x, gx)
        return fn

    return _make(real, (x,), backward_real), _make(imag, (x,), backward_imag)


# -- linear algebra helpers (forward only) ------------------------------------


def eigh_sym(a: Tensor | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues/vectors of a symmetric matrix. Forward only, for checks."""
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    return np.linalg.eigh(arr)
