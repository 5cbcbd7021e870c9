"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 selectable for
gradient checking) and record the operations that produced them. Calling
``backward`` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients into every leaf that has
``requires_grad`` set.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_debug_checks = False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class GraphError(RuntimeError):
    """Raised on invalid graph operations (e.g. backward from a non-scalar)."""


class DomainError(ValueError):
    """Raised in debug mode when an op leaves its numeric domain."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Assert finite outputs and numeric domains for every op in the block."""
    global _debug_checks
    prev = _debug_checks
    _debug_checks = enabled
    try:
        yield
    finally:
        _debug_checks = prev


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    DEFAULT_DTYPE = np.dtype(dtype).type


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # keep the precision of float arrays (64-bit checking mode)
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[], None]] = None
        self.op: str = "leaf"

    # -- construction -----------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=None):
        return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False, dtype=None):
        return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad)

    # -- inspection --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- graph -------------------------------------------------------------

    def _ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> "Graph":
        return backward(self)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self, axis=None):
        return reduce_max(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Graph:
    """Ordered record of the operations reachable from a root tensor.

    ``nodes`` is a topological order consistent with execution order;
    ``backward`` visits each node exactly once.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _toposort(root)

    def ops(self):
        return [(t.op, t._parents, t) for t in self.nodes if t._parents]

    def release(self) -> None:
        """Drop closures/parent links so a finished graph can be collected."""
        for t in self.nodes:
            t._backward = None
            t._parents = ()


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root: Tensor) -> list:
    order: list = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Create an op output tensor, recording the graph edge when grads are on."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise DomainError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bwd():
        g = out.grad
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(g, b.shape)

    out = _wrap(out_data, (a, b), bwd, "add")
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bwd():
        g = out.grad
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad -= _unbroadcast(g, b.shape)

    out = _wrap(out_data, (a, b), bwd, "sub")
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bwd():
        g = out.grad
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(g * a.data, b.shape)

    out = _wrap(out_data, (a, b), bwd, "mul")
    return out


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            a.grad += out.grad * (a.data > 0)

    out = _wrap(out_data, (a,), bwd, "relu")
    return out


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            a.grad += out.grad * out_data * (1.0 - out_data)

    out = _wrap(out_data, (a,), bwd, "sigmoid")
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            a.grad += out.grad * out_data

    out = _wrap(out_data, (a,), bwd, "exp")
    return out


def log(a: Tensor) -> Tensor:
    if _debug_checks and np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            a.grad += out.grad / a.data

    out = _wrap(out_data, (a,), bwd, "log")
    return out


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu,
                "sigmoid": sigmoid, "exp": exp, "log": log}


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch an elementwise op by name; binary kinds require ``b``."""
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise op '{kind}'")
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"'{kind}' needs two operands")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"'{kind}' is unary")
    return fn(a)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed through only inside the open range."""
    out_data = np.clip(a.data, lo, hi)

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            a.grad += out.grad * ((a.data > lo) & (a.data < hi))

    out = _wrap(out_data, (a,), bwd, "clip")
    return out


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            a.grad += out.grad * (0.5 / out_data)

    out = _wrap(out_data, (a,), bwd, "sqrt")
    return out


# -- matmul ------------------------------------------------------------------


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd():
        g = out.grad
        if a.requires_grad:
            a._ensure_grad()
            a.grad += _unbroadcast(g @ _swap_last(b.data), a.shape)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += _unbroadcast(_swap_last(a.data) @ g, b.shape)

    out = _wrap(out_data, (a, b), bwd, "matmul")
    return out


# -- reductions ----------------------------------------------------------------


def _check_axis(a: Tensor, axis, op: str):
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"{op}: axis {axis} out of range for rank {a.ndim}")


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(a, axis, "sum")
    out_data = a.data.sum(axis=axis)

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            g = out.grad
            if axis is None:
                a.grad += g
            else:
                a.grad += np.expand_dims(g, axis)

    out = _wrap(np.asarray(out_data, dtype=a.dtype), (a,), bwd, "sum")
    return out


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(a, axis, "mean")
    n = a.size if axis is None else a.shape[axis]
    out_data = a.data.mean(axis=axis)

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            g = out.grad
            if axis is None:
                a.grad += g / n
            else:
                a.grad += np.expand_dims(g, axis) / n

    out = _wrap(np.asarray(out_data, dtype=a.dtype), (a,), bwd, "mean")
    return out


def reduce_max(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Max reduction; backward routes to the first maximal element."""
    _check_axis(a, axis, "max")
    out_data = a.data.max(axis=axis)
    # argmax picks the lowest index among ties, which fixes the backward route
    idx = a.data.argmax(axis=axis)

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            g = out.grad
            if axis is None:
                flat = a.grad.reshape(-1)
                flat[idx] += g
            else:
                g_exp = np.expand_dims(g, axis)
                mask = np.zeros_like(a.data)
                np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis)
                a.grad += mask * g_exp

    out = _wrap(np.asarray(out_data, dtype=a.dtype), (a,), bwd, "max")
    return out


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(kind: str, a: Tensor, axis: Optional[int] = None) -> Tensor:
    fn = _REDUCE.get(kind)
    if fn is None:
        raise ValueError(f"unknown reduction '{kind}'")
    return fn(a, axis)


# -- softmax ---------------------------------------------------------------------


def softmax(a: Tensor, axis: int) -> Tensor:
    _check_axis(a, axis, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            g = out.grad
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a.grad += out_data * (g - dot)

    out = _wrap(out_data, (a,), bwd, "softmax")
    return out


def log_softmax(a: Tensor, axis: int) -> Tensor:
    _check_axis(a, axis, "log_softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            g = out.grad
            sm = np.exp(out_data)
            a.grad += g - sm * g.sum(axis=axis, keepdims=True)

    out = _wrap(out_data, (a,), bwd, "log_softmax")
    return out


# -- shape ops ----------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            a.grad += out.grad.reshape(a.shape)

    out = _wrap(out_data, (a,), bwd, "reshape")
    return out


def transpose(a: Tensor, axes: Optional[tuple] = None) -> Tensor:
    out_data = a.data.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            a.grad += out.grad.transpose(inv)

    out = _wrap(out_data, (a,), bwd, "transpose")
    return out


def gather(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; backward scatter-adds (repeats accumulate)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather: index out of range for extent {a.shape[0]}")
    out_data = a.data[idx]

    def bwd():
        if a.requires_grad:
            a._ensure_grad()
            np.add.at(a.grad, idx, out.grad)

    out = _wrap(out_data, (a,), bwd, "gather")
    return out


# -- backward and checking -----------------------------------------------------------


def backward(loss: Tensor) -> Graph:
    """Reverse-mode sweep from a scalar; returns the traversed graph."""
    if loss.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {loss.shape}")
    graph = Graph(loss)
    loss._ensure_grad()
    loss.grad += np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None:
            node._backward()
    return graph


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: Tensor,
                      epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a tensor to a scalar tensor and must be deterministic; the
    check runs in 64-bit regardless of the point's dtype.
    """
    x = Tensor(np.asarray(point.data, dtype=np.float64), requires_grad=True)
    loss = fn(x)
    backward(loss)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(fn(x).data)
            flat[i] = orig - epsilon
            lo = float(fn(x).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * epsilon)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
