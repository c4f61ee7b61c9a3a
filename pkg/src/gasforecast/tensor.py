"""Dense float64 tensors with a reverse-mode gradient tape.

A :class:`Tensor` is an immutable wrapper around a row-major ``float64``
ndarray. Tensors created with :meth:`GradTape.watch` become leaves of the
tape; every op that touches a taped tensor records a node holding its parent
ids and a vector-Jacobian rule. :meth:`GradTape.backward` walks the nodes in
reverse insertion order, which is a valid reverse topological order because
parents are always recorded before their children.

Broadcasting follows the right-aligned rule (each trailing dimension equal,
or 1 on one side). Gradients of broadcast operands are summed back to the
operand's shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (non-scalar loss, second backward, mixed tapes)."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array, optionally attached to a :class:`GradTape`."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, *, tape: "GradTape | None" = None, node: int | None = None,
                 _check: bool = True):
        arr = np.array(data, dtype=np.float64, copy=True)
        if _check and not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (NaN/Inf rejected)")
        self.data = _freeze(np.ascontiguousarray(arr))
        self.tape = tape
        self.node = node

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape=None, node=None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _freeze(np.ascontiguousarray(arr, dtype=np.float64))
        out.tape = tape
        out.node = node
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


class GradTape:
    """Append-only record of differentiable ops.

    One tape serves one forward/backward pass; a second :meth:`backward`
    raises instead of silently accumulating.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Return a leaf copy of ``value`` recorded on this tape."""
        if self._consumed:
            raise TapeError("tape already consumed by backward(); start a new tape")
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (NaN/Inf rejected)")
        node = self._record((), None, arr.shape)
        return Tensor._wrap(np.array(arr, dtype=np.float64), tape=self, node=node)

    def _record(self, parents, vjp, shape) -> int:
        self.nodes.append(_Node(tuple(parents), vjp, tuple(shape)))
        return len(self.nodes) - 1

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of the scalar ``loss`` for every node that reaches it.

        Returns a mapping from node id to gradient array. Leaves that do not
        influence the loss are absent; :meth:`gradient` fills them with zeros.
        """
        if self._consumed:
            raise TapeError("backward() already called on this tape")
        if loss.tape is not self or loss.node is None:
            raise TapeError("loss is not recorded on this tape")
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
        for idx in range(loss.node, -1, -1):
            g = grads.get(idx)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
        return grads

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Run backward and return d(loss)/d(p) for each watched ``p``."""
        grads = self.backward(loss)
        out = []
        for p in params:
            if p.tape is not self:
                raise TapeError("parameter is not watched by this tape")
            g = grads.get(p.node)
            out.append(np.zeros(p.shape) if g is None else np.asarray(g).reshape(p.shape))
        return out


# ---------------------------------------------------------------------------
# op plumbing

def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _common_tape(*ts: Tensor) -> "GradTape | None":
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = t.tape
    if tape is not None and tape._consumed:
        raise TapeError("tape already consumed by backward(); start a new tape")
    return tape


def _result(arr: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = _common_tape(*inputs)
    if tape is None:
        return Tensor._wrap(arr)
    parents = [t.node if t.tape is tape else None for t in inputs]
    node = tape._record(parents, vjp, arr.shape)
    return Tensor._wrap(arr, tape=tape, node=node)


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"cannot broadcast shapes {a} and {b}")
        out.append(max(da, db) if da != 0 and db != 0 else 0)
    return tuple(reversed(out))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of right-aligned broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    out = fwd(a.data, b.data)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (unbroadcast(da(g, a.data, b.data, out), sa),
                unbroadcast(db(g, a.data, b.data, out), sb))

    return _result(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y))


def _unary(x, fwd, dfn) -> Tensor:
    x = as_tensor(x)
    out = fwd(x.data)
    return _result(out, (x,), lambda g: (dfn(g, x.data, out),))


def neg(x) -> Tensor:
    return _unary(x, np.negative, lambda g, x, o: -g)


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    return _unary(x, _sigmoid, lambda g, x, o: g * o * (1.0 - o))


def relu(x) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, x, o: g * (x > 0))


def sqrt(x) -> Tensor:
    return _unary(x, np.sqrt, lambda g, x, o: g * 0.5 / o)


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda g, x, o: g * o)


def square(x) -> Tensor:
    return _unary(x, np.square, lambda g, x, o: 2.0 * g * x)


def absolute(x) -> Tensor:
    return _unary(x, np.abs, lambda g, x, o: g * np.sign(x))


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul,
    "tanh": tanh, "sigmoid": sigmoid, "relu": relu,
}


def elementwise(x, f: str, y=None) -> Tensor:
    """Dispatch by name: binary ops take ``y``, unary ones must not."""
    try:
        fn = ELEMENTWISE[f]
    except KeyError:
        raise ValueError(f"unknown elementwise op {f!r}; expected one of {sorted(ELEMENTWISE)}")
    if f in ("add", "sub", "mul"):
        if y is None:
            raise ValueError(f"{f} is binary and needs a second operand")
        return fn(x, y)
    if y is not None:
        raise ValueError(f"{f} is unary")
    return fn(x)


# ---------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` of (k, n) or (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            # shared weight: fold batch axes into one product
            gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, sa), unbroadcast(gb, sb)

    return _result(out, (a, b), vjp)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs ndim >= 2, got {x.shape}")
    out = np.swapaxes(x.data, -1, -2)
    return _result(out, (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(src),))


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (x,), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[ax] for ax in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def softmax(x) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the slice max."""
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _result(out, (x,), vjp)


def max_axis(x, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first argmax only."""
    x = as_tensor(x)
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    src = x.shape

    def vjp(g):
        gx = np.zeros(src)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), vjp)


# ---------------------------------------------------------------------------
# indexing and assembly

def select(x, index: int, axis: int) -> Tensor:
    """Take one position along ``axis``, dropping that axis."""
    x = as_tensor(x)
    axis = axis % x.ndim
    out = np.take(x.data, index, axis=axis)
    src = x.shape

    def vjp(g):
        gx = np.zeros(src)
        sl = [slice(None)] * len(src)
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _result(out, (x,), vjp)


def slice_axis(x, start: int, stop: int, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = x.data[sl]
    src = x.shape

    def vjp(g):
        gx = np.zeros(src)
        gx[sl] = g
        return (gx,)

    return _result(out, (x,), vjp)


def concat(xs: Sequence, axis: int) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    axis = axis % xs[0].ndim
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in xs]}: {exc}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def vjp(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return parts

    return _result(out, xs, vjp)


def stack(xs: Sequence, axis: int) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("stack of an empty list")
    if len({t.shape for t in xs}) != 1:
        raise ShapeError(f"stack needs equal shapes, got {[t.shape for t in xs]}")
    out = np.stack([t.data for t in xs], axis=axis)
    axis = axis % out.ndim

    def vjp(g):
        return [np.take(g, i, axis=axis) for i in range(len(xs))]

    return _result(out, xs, vjp)


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def backward(tape: GradTape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)
