"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When gradient recording is
enabled and any input requires a gradient, the output keeps references to its
inputs together with a closure that maps the output gradient to input
gradients. :func:`backward` orders those records topologically (the tape) and
replays them in reverse.

Broadcasting is limited to adding a bias vector to every row of a matrix and
to Python scalars.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import DegenerateVectorError, ShapeError

NORM_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable gradient recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    __array_priority__ = 1000

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by Python scalars")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Tape:
    """Recorded operations reachable from a root, inputs before outputs."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
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
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every gradient-requiring tensor reachable from ``loss``.

    Gradients accumulate: a tensor reached along several paths receives the
    sum, and repeated calls add onto existing ``grad`` buffers.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_root(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# elementwise arithmetic ----------------------------------------------------


def _unbias(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # row-broadcast bias: (m, n) against (n,)
    return g.sum(axis=0)


def _check_add_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_add_shapes(a, b)

    def bw(g):
        return _unbias(g, a.shape), _unbias(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_add_shapes(a, b)

    def bw(g):
        return _unbias(g, a.shape), -_unbias(g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        return _unbias(g * b.data, a.shape), _unbias(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for [m, k] @ [k, n] or [m, k] @ [k]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def dot(u: Tensor, v: Tensor) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"dot needs two vectors of equal length, got {u.shape} and {v.shape}")

    def bw(g):
        return g * v.data, g * u.data

    return _make(np.asarray(u.data @ v.data), (u, v), bw, "dot")


def l2_normalize(v: Tensor) -> Tensor:
    """Scale a vector, or every row of a matrix, to unit Euclidean norm."""
    v = as_tensor(v)
    if v.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize needs a vector or matrix, got shape {v.shape}")
    norm = np.sqrt(np.sum(v.data * v.data, axis=-1, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateVectorError(f"cannot normalize a vector with norm <= {NORM_EPS}")
    y = v.data / norm

    def bw(g):
        return ((g - y * np.sum(y * g, axis=-1, keepdims=True)) / norm,)

    return _make(y, (v,), bw, "l2_normalize")


def logsumexp(xs, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) with max subtraction.

    ``xs`` is a tensor reduced along ``axis`` or a non-empty sequence of scalars.
    """
    if not isinstance(xs, Tensor):
        items = list(xs)
        if not items:
            raise ValueError("logsumexp of an empty list")
        xs = stack([as_tensor(x) for x in items])
        axis = 0
    if xs.ndim == 0:
        raise ShapeError("logsumexp needs at least one axis")
    m = np.max(xs.data, axis=axis, keepdims=True)
    shifted = np.exp(xs.data - m)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(total), axis=axis)
    soft = shifted / total

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _make(out, (xs,), bw, "logsumexp")


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(np.sum(x.data, axis=axis)), (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / count)


def max_(x: Tensor, axis: int | None = None) -> Tensor:
    """Maximum; the gradient flows to the first maximal entry only."""
    x = as_tensor(x)
    if axis is None:
        flat = int(np.argmax(x.data))

        def bw(g):
            out = np.zeros(x.size)
            out[flat] = g
            return (out.reshape(x.shape),)

        return _make(np.asarray(x.data.reshape(-1)[flat]), (x,), bw, "max")
    idx = np.argmax(x.data, axis=axis)
    vals = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis)

    def bw_axis(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (out,)

    return _make(np.squeeze(vals, axis=axis), (x,), bw_axis, "max")


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in the gradient."""
    x = as_tensor(x)
    if isinstance(index, Tensor):
        raise TypeError("index with integers or integer arrays, not tensors")
    out = np.asarray(x.data[index])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), bw, "take")


def stack(tensors: Iterable[Tensor]) -> Tensor:
    items = [as_tensor(t) for t in tensors]
    if not items:
        raise ValueError("stack of an empty list")
    shape = items[0].shape
    if any(t.shape != shape for t in items):
        raise ShapeError(f"stack needs equal shapes, got {[t.shape for t in items]}")

    def bw(g):
        return [g[i] for i in range(len(items))]

    return _make(np.stack([t.data for t in items]), items, bw, "stack")


def concat(tensors: Iterable[Tensor]) -> Tensor:
    """Join tensors along the first axis."""
    items = [as_tensor(t) for t in tensors]
    if not items:
        raise ValueError("concat of an empty list")
    if any(t.shape[1:] != items[0].shape[1:] or t.ndim == 0 for t in items):
        raise ShapeError(f"concat needs matching trailing shapes, got {[t.shape for t in items]}")
    bounds = np.cumsum([0] + [t.shape[0] for t in items])

    def bw(g):
        return [g[bounds[i] : bounds[i + 1]] for i in range(len(items))]

    return _make(np.concatenate([t.data for t in items]), items, bw, "concat")
