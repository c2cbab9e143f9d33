"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is define-by-run: every forward op records its inputs and a
backward rule on the output tensor, and ``backward`` replays the recorded
nodes in reverse execution order. Gradients accumulate additively into
``Tensor.grad``, so repeated backward calls without a reset double them.

Two primitives exist purely for gradient control: ``stop_gradient`` blocks
all flow into its input, ``scale_gradient`` multiplies the incoming
gradient by a constant. Both are identity functions on the forward pass
and share the input buffer, so forward values are bitwise unchanged.
"""

from __future__ import annotations

import itertools
import math
import threading

import numpy as np

_node_counter = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Backward called on something that is not a scalar loss."""


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses graph construction (eval-only paths)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_index", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._index = next(_node_counter)
        self._parents = ()
        self._backprop = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.ndim == 0:
            return float(self.data)
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and ndarrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backprop) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._index = next(_node_counter)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backprop = backprop
    else:
        out.requires_grad = False
        out._parents = ()
        out._backprop = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable requires_grad tensor."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    visited: dict[int, Tensor] = {id(loss): loss}
    stack = [loss]
    while stack:
        for p in stack.pop()._parents:
            if id(p) not in visited:
                visited[id(p)] = p
                stack.append(p)
    nodes = sorted((t for t in visited.values() if t._backprop is not None),
                   key=lambda t: t._index)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = adjoint.get(id(node))
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backprop(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if held is None else held + pg
    # adjoint arrays may alias graph buffers or each other; gradients are
    # read-only by convention (optimizer and clip rebind, never mutate)
    for t in sorted(visited.values(), key=lambda t: t._index):
        g = adjoint.get(id(t))
        if g is None or not t.requires_grad:
            continue
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def bp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), bp)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def bp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), bp)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def bp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bp)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def bp(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _make(out, (x,), bp)


# ---------------------------------------------------------------------------
# matrix products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b where b is a 2-D weight; a may carry one leading batch axis."""
    a, b = _lift(a), _lift(b)
    if b.ndim != 2 or a.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    a2 = a.data.reshape(-1, a.shape[-1])
    out2 = a2 @ b.data
    out = out2.reshape(a.shape[:-1] + (b.shape[1],))

    def bp(g):
        g2 = g.reshape(-1, b.shape[1])
        ga = (g2 @ b.data.T).reshape(a.data.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a leading axis: [B,m,k] @ [B,k,n]."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes {a.shape} and {b.shape} do not align")
    out = np.matmul(a.data, b.data)

    def bp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bp)


def transpose_last(x: Tensor) -> Tensor:
    out = np.swapaxes(x.data, -1, -2)

    def bp(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(out, (x,), bp)


# ---------------------------------------------------------------------------
# normalizations and reductions

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), bp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bp)


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale-free RMS normalization along the last axis."""
    n = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    y = x.data * inv

    def bp(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        return (g * inv - x.data * (inv ** 3) * dot / n,)

    return _make(y, (x,), bp)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = x.data.sum(axis=axis)

    def bp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _make(np.asarray(out), (x,), bp)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def bp(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, x.data.shape).copy(),)

    return _make(np.asarray(out), (x,), bp)


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, _lift(target))
    return tmean(mul(diff, diff))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy got logits {logits.shape}, targets {targets.shape}")
    ls = log_softmax(logits, axis=1)
    picked = take_pairs(ls, np.arange(logits.shape[0]), targets, unique=True)
    return -tmean(picked)


# ---------------------------------------------------------------------------
# indexing, gathering, reshaping

def top_k(x: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Top-k values along the last axis of a 2-D tensor, ties to lower index.

    Indices are plain integers (non-differentiable); the gathered values
    remain connected to the graph.
    """
    if x.ndim != 2:
        raise ShapeError(f"top_k expects a 2-D tensor, got {x.shape}")
    if not 1 <= k <= x.shape[1]:
        raise ShapeError(f"top_k k={k} out of range for {x.shape[1]} columns")
    idx = np.argsort(-x.data, axis=1, kind="stable")[:, :k]
    vals = np.take_along_axis(x.data, idx, axis=1)

    def bp(g):
        z = np.zeros_like(x.data)
        np.put_along_axis(z, idx, g, axis=1)
        return (z,)

    return _make(vals, (x,), bp), idx


def take_rows(x: Tensor, rows, unique: bool = False) -> Tensor:
    """Gather rows; pass unique=True when no index repeats to skip the
    slower accumulating scatter on the backward pass."""
    rows = np.asarray(rows, dtype=np.int64)
    out = x.data[rows]

    def bp(g):
        z = np.zeros_like(x.data)
        if unique:
            z[rows] = g
        else:
            np.add.at(z, rows, g)
        return (z,)

    return _make(out, (x,), bp)


def scatter_rows(src: Tensor, rows, length: int, unique: bool = False) -> Tensor:
    """Place rows of src at the given indices of a zero [length, ...] tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((length,) + src.shape[1:], dtype=np.float64)
    if unique:
        out[rows] = src.data
    else:
        np.add.at(out, rows, src.data)

    def bp(g):
        return (g[rows],)

    return _make(out, (src,), bp)


def take_pairs(x: Tensor, rows, cols, unique: bool = False) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = x.data[rows, cols]

    def bp(g):
        z = np.zeros_like(x.data)
        if unique:
            z[rows, cols] = g
        else:
            np.add.at(z, (rows, cols), g)
        return (z,)

    return _make(out, (x,), bp)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bp(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return (z,)

    return _make(out, (table,), bp)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bp(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return _make(out, tuple(tensors), bp)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bp(g):
        return (g.reshape(x.data.shape),)

    return _make(out, (x,), bp)


# ---------------------------------------------------------------------------
# gradient control

def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; backward propagates exactly zero into x."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.grad = None
    out._index = next(_node_counter)
    out._parents = ()
    out._backprop = None
    return out


def scale_gradient(x: Tensor, s: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by s."""
    s = float(s)
    if not math.isfinite(s):
        raise ValueError(f"scale_gradient factor must be finite, got {s}")

    def bp(g):
        return (s * g,)

    return _make(x.data, (x,), bp)
