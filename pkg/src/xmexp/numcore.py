"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on a :class:`Tensor` that has at least one input with
``requires_grad`` records its inputs and a backward rule.  Calling
:func:`backward` on a scalar walks the recorded graph in reverse creation
order and accumulates gradients into the leaves.

Elementwise operations follow numpy broadcasting; gradients are summed back
to each input's shape.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GradCheckError(ValueError):
    pass


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    Attributes:
        data: the forward value.
        requires_grad: whether gradients are tracked for this tensor.
        grad: accumulated gradient for leaves, ``None`` until the first
            backward pass reaches it.
        op: name of the operation that produced the tensor (``"leaf"`` for
            user-created tensors).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar.
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_ids)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = rule
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
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


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# Kink bookkeeping for finite-difference checks: non-smooth ops log which side
# of their kink each element sits on while a recorder is active.
def _log_kink(pattern: np.ndarray) -> None:
    log = getattr(_local, "kinks", None)
    if log is not None:
        log.append(np.packbits(pattern).tobytes())


class _KinkRecorder:
    def __enter__(self):
        self.prev = getattr(_local, "kinks", None)
        _local.kinks = []
        return _local.kinks

    def __exit__(self, *exc):
        _local.kinks = self.prev
        return False


# ---------------------------------------------------------------------------
# Binary elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError(f"div: zero divisor in tensor of shape {b.shape}")
    out = a.data / b.data

    def rule(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), "div", rule)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    take_a = a.data <= b.data
    _log_kink(take_a)

    def rule(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _result(np.where(take_a, a.data, b.data), (a, b), "minimum", rule)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def rule(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), "matmul", rule)


# ---------------------------------------------------------------------------
# Unary ops
# ---------------------------------------------------------------------------


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), "scale", lambda g: (g * c,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        bad = float(x.data[x.data <= 0].reshape(-1)[0])
        raise DomainError(f"log: non-positive input {bad!r} in tensor of shape {x.shape}")
    return _result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # 0.5*(1+tanh(x/2)) avoids overflow for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    _log_kink(pos)
    return _result(np.where(pos, x.data, 0.0), (x,), "relu", lambda g: (g * pos,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    _log_kink(pos)
    factor = np.where(pos, 1.0, slope)
    return _result(x.data * factor, (x,), "leaky_relu", lambda g: (g * factor,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    _log_kink(x.data > 0)
    return _result(np.abs(x.data), (x,), "abs", lambda g: (g * sign,))


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = as_tensor(x)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (x.data >= lo_) & (x.data <= hi_)
    _log_kink(np.concatenate([(x.data < lo_).ravel(), (x.data > hi_).ravel()]))
    return _result(np.clip(x.data, lo_, hi_), (x,), "clamp", lambda g: (g * inside,))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    if p != int(p) and np.any(x.data < 0):
        raise DomainError(f"power: negative base with non-integer exponent {p}")
    return _result(x.data**p, (x,), "power", lambda g: (g * p * x.data ** (p - 1.0),))


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (x,), "sum", rule)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, a, b), (x,), "swapaxes", lambda g: (np.swapaxes(g, a, b),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def rule(g):
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index], dtype=np.float64), (x,), "getitem", rule)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, ts, "concat", rule)


def concat_rows(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=0)


_KINDS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "concat_rows": lambda *ts: concat_rows(ts),
    "sum": tsum,
    "mean": mean,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "clamp": clamp,
    "scale": scale,
    "abs": absolute,
    "minimum": minimum,
}


def tensor_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the primitive named ``kind`` (dispatch table over this module)."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown tensor op {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if output.data.size != 1:
        raise ShapeError(f"backward: output must be a scalar, got shape {output.shape}")
    if not output.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t.parents if p.requires_grad and p._id not in nodes)

    grads: dict[int, np.ndarray] = {output._id: np.ones_like(output.data)}
    # creation ids increase along every edge, so descending id is a reverse topological order
    for tid in sorted(nodes, reverse=True):
        node = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped: int


def grad_check_detailed(
    function: Callable[[Tensor], Tensor], point, step: float = 1e-5
) -> GradCheckResult:
    """Compare the analytic gradient with central differences coordinate-wise.

    Coordinates whose difference stencil crosses a kink of a non-smooth op
    (relu, leaky_relu, clamp, abs, minimum) are skipped and counted.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with _KinkRecorder() as pattern:
        out = function(x)
    if not np.all(np.isfinite(out.data)):
        raise GradCheckError("grad_check: non-finite function value at the base point")
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    base_pattern = list(pattern)

    def evaluate(values: np.ndarray, coord: tuple) -> tuple[float, list]:
        with _KinkRecorder() as pat:
            val = function(Tensor(values)).item()
        if not np.isfinite(val):
            raise GradCheckError(f"grad_check: non-finite function value at coordinate {coord}")
        return val, list(pat)

    worst = 0.0
    checked = skipped = 0
    flat = base.reshape(-1)
    for k in range(flat.size):
        coord = np.unravel_index(k, base.shape)
        plus = flat.copy()
        plus[k] += step
        minus = flat.copy()
        minus[k] -= step
        fp, pp = evaluate(plus.reshape(base.shape), coord)
        fm, pm = evaluate(minus.reshape(base.shape), coord)
        if pp != base_pattern or pm != base_pattern:
            skipped += 1
            continue
        numeric = (fp - fm) / (2.0 * step)
        a = float(analytic.reshape(-1)[k])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
        checked += 1
    return GradCheckResult(worst, checked, skipped)


def grad_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return grad_check_detailed(function, point, step).max_relative_error
