"""Dense tensors with tape-based reverse-mode differentiation.

Every operation returns a fresh ``Tensor``; nothing mutates its inputs. When
gradient recording is on and an input requires a gradient, the output keeps a
reference to its parents and a closure mapping the output gradient to the
parent gradients. ``backward`` walks that graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_state = {"dtype": np.dtype(np.float32), "grad": True}

DENOM_FLOOR = 1e-12
NORM_EPS = 1e-6


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    previous = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = previous


def is_grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        self.data = np.array(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state["dtype"]
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _finish(arr: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor._wrap(arr)
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _guard_denominator(arr: np.ndarray, op: str) -> None:
    if np.any(np.abs(arr) < DENOM_FLOOR):
        raise NumericError(f"{op}: denominator magnitude below {DENOM_FLOOR:g}")


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _finish(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _finish(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _finish(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "div")
    _guard_denominator(b.data, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _finish(out, (a, b), backward, "div")


def elementwise(a, b, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def neg(x: Tensor) -> Tensor:
    return _finish(-x.data, (x,), lambda g: (-g,), "neg")


def square(x: Tensor) -> Tensor:
    return _finish(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def abs_(x: Tensor) -> Tensor:
    return _finish(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def reciprocal(x: Tensor) -> Tensor:
    _guard_denominator(x.data, "reciprocal")
    out = 1.0 / x.data
    return _finish(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def unary(x: Tensor, kind: str) -> Tensor:
    ops = {"neg": neg, "square": square, "abs": abs_, "reciprocal": reciprocal}
    if kind not in ops:
        raise ValueError(f"unknown unary kind {kind!r}")
    return ops[kind](x)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _finish(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    _guard_denominator(out, "sqrt")
    return _finish(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor
    out = np.where(keep, x.data, floor).astype(x.dtype, copy=False)
    return _finish(out, (x,), lambda g: (g * keep,), "clamp_min")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    return _finish(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _finish(out, (x,), backward, "gelu")


# -- shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _finish(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _finish(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, xs))

    return _finish(out, xs, backward, "concat")


# -- linear algebra and reductions --------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _finish(out, (a, b), backward, "matmul")


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def reduce(x: Tensor, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=True)
        local = None
    elif kind == "mean":
        out = x.data.sum(axis=axes, keepdims=True) / count
        local = None
    elif kind == "max":
        out = x.data.max(axis=axes, keepdims=True)
        hit = (x.data == out).astype(x.dtype)
        local = hit / hit.sum(axis=axes, keepdims=True)
    else:
        raise ValueError(f"unknown reduction {kind!r}")

    def backward(g):
        if not keepdims:
            g = g.reshape(out.shape)
        g = np.broadcast_to(g, x.shape)
        if kind == "mean":
            return (g / count,)
        if kind == "max":
            return (g * local,)
        return (np.array(g),)

    result = out if keepdims else out.reshape([n for i, n in enumerate(x.shape) if i not in axes])
    return _finish(result, (x,), backward, kind)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _finish(out, (x,), backward, "softmax")


def normalize_l2(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Divide each fiber along ``axis`` by its L2 norm plus ``eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    axis = _norm_axis(axis, x.ndim)[0]
    v = x.data
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    denom = norm + eps
    out = v / denom

    def backward(g):
        safe = np.where(norm > 0, norm, 1.0)
        proj = (g * v).sum(axis=axis, keepdims=True) / (safe * denom * denom)
        return (g / denom - v * proj,)

    return _finish(out, (x,), backward, "normalize_l2")


def std(x: Tensor, axis, eps: float = 0.0) -> Tensor:
    """Population standard deviation over ``axis`` (kept as size-1 dims).

    The derivative at zero spread is taken as zero rather than infinite.
    """
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    centered = x.data - x.data.mean(axis=axes, keepdims=True)
    out = np.sqrt((centered * centered).sum(axis=axes, keepdims=True) / count)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * centered / (count * safe), 0.0),)

    return _finish(out + eps if eps else out, (x,), backward, "std")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * weight.data + bias.data

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gh = g * weight.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if weight.requires_grad:
            gw = _unbroadcast(g * xhat, weight.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        return gx, gw, gb

    return _finish(out, (x, weight, bias), backward, "layer_norm")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over positions where ``mask`` is set; zero gradient elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise NumericError("masked_mean: empty selection")
    weights = mask.astype(x.dtype) / count
    out = np.asarray((x.data * weights).sum(), dtype=x.dtype)
    return _finish(out, (x,), lambda g: (g * weights,), "masked_mean")


# -- differentiation ---------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, step: float = 1e-5,
                     indices: Iterable[int] | None = None) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Only the flat ``indices`` are probed when given; other entries stay zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = x.data.astype(x.dtype, copy=True)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    probe = range(flat.size) if indices is None else indices

    def value(arr):
        with no_grad():
            y = f(Tensor._wrap(arr.reshape(x.shape)))
        return float(y.data.reshape(-1)[0]) if isinstance(y, Tensor) else float(y)

    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        hi = value(flat.copy())
        flat[i] = orig - step
        lo = value(flat.copy())
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return Tensor._wrap(out.reshape(x.shape))
