"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (row-major, float64 by default, float32 selectable)
and record local-gradient closures on an implicit tape as ops execute.
``backward`` replays the tape in reverse topological order, accumulating
gradients over fan-out. The tape is single-use: a second ``backward`` on the
same graph raises.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "set_default_dtype",
    "get_default_dtype",
    "tensor",
    "zeros",
    "concat",
    "matmul",
    "sigmoid",
    "gelu",
    "silu",
    "softmax_rows",
    "layer_norm",
    "rms_norm",
    "embedding",
    "mask_fill",
    "grad_check",
]

_DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's precondition."""


class NonFiniteError(FloatingPointError):
    """Raised when an op receives or produces disallowed non-finite values."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_children", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _children: tuple = ()):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._children = _children
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        The loss must be a 1-element tensor. Gradients accumulate (sum) over
        fan-out. Consumes the tape: the graph cannot be replayed.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward()")
        self._consumed = True
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node._backward(node.grad)
                node._backward = None  # single-use tape
                node._children = ()

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(np.array(-1.0)))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, p):
        return pow_const(self, float(p))

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method aliases used all over the model code
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, iter(root._children))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for child in it:
            if id(child) not in seen:
                seen.add(id(child))
                stack.append((child, iter(child._children)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _needs_tape(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in tensors)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over axes that were broadcast to reach ``grad.shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(out_data, children, backward) -> Tensor:
    out = Tensor(out_data, _children=tuple(children))
    if _needs_tape(*children):
        out.requires_grad = True
        out._backward = backward
    else:
        out._children = ()
    return out


# ---------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, gradients unbroadcast)
# ---------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad or b._backward is not None:
            b._accum(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad or b._backward is not None:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._backward is not None:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        if a.requires_grad or a._backward is not None:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad or b._backward is not None:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def pow_const(a: Tensor, p: float) -> Tensor:
    data = a.data ** p

    def backward(g):
        a._accum(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accum(g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return _make(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        a._accum(g * 0.5 / data)

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - data * data))

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable two-branch form; exact 0 at -inf
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)

    def backward(g):
        a._accum(g * data * (1.0 - data))

    return _make(data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        a._accum(g * d)

    return _make(data, (a,), backward)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    data = a.data * s

    def backward(g):
        a._accum(g * (s + a.data * s * (1.0 - s)))

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad or a._backward is not None:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._backward is not None:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accum(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.shape).copy())

    return _make(data, (a,), backward)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else (
        np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), Tensor(np.array(1.0 / float(n))))


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = a.data.transpose(axes)

    def backward(g):
        if axes is None:
            a._accum(g.transpose())
        else:
            inv = np.argsort(axes)
            a._accum(g.transpose(inv))

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._backward is not None:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _make(data, tensors, backward)


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(data, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into ``table`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accum(full)

    return _make(data, (table,), backward)


def mask_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Set positions where boolean ``mask`` is True to ``value`` (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    data = np.where(mask, value, a.data)

    def backward(g):
        a._accum(np.where(mask, 0.0, g))

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilized by max-subtraction.

    -inf entries (masking) are allowed and get exactly zero weight; NaN or
    +inf inputs raise NonFiniteError.
    """
    d = x.data
    if np.isnan(d).any() or np.isposinf(d).any():
        raise NonFiniteError("softmax_rows: NaN or +inf in input")
    m = d.max(axis=-1, keepdims=True)
    e = np.exp(d - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        x._accum(s * (g - dot))

    return _make(s, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row (trailing axis) standardization followed by gain and bias."""
    mu = mean_(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean_(mul(xc, xc), axis=-1, keepdims=True)
    inv = pow_const(add(var, Tensor(np.array(eps))), -0.5)
    return add(mul(mul(xc, inv), gain), bias)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """x / sqrt(mean(x^2) + eps) over the trailing axis, then elementwise gain."""
    ms = mean_(mul(x, x), axis=-1, keepdims=True)
    inv = pow_const(add(ms, Tensor(np.array(eps))), -0.5)
    return mul(mul(x, inv), gain)


# ---------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------

def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a Tensor to a scalar Tensor. Relative error per coordinate
    is |analytic - cd| / max(|analytic|, |cd|, 1e-12).
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"h={h} outside [1e-7, 1e-3]")
    xt = Tensor(x.data.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise ShapeError("grad_check: f must be scalar-valued")
    out.backward()
    analytic = (xt.grad if xt.grad is not None else np.zeros_like(xt.data)).ravel()

    base = x.data.copy()
    numeric = np.zeros(base.size)
    flat = base.ravel()
    for i in range(base.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(base.copy())).item()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"grad_check: non-finite value at coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
