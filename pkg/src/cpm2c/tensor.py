"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus an optional gradient slot. Operations
executed while a ``Tape`` is active record backward rules onto the tape;
``backward(loss)`` replays them in reverse append order and accumulates
gradients into every ``requires_grad`` leaf that contributed to the loss.

Precision is a process-wide switch: float32 for training and evaluation,
float64 for finite-difference gradient checking (use the ``precision``
context manager). Tapes are per-forward-pass and thread-local; independent
tapes may run concurrently on disjoint data.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError, GraphError, ShapeError

_FLOAT_DTYPES = {"float32": np.float32, "float64": np.float64}

_state = threading.local()


def _tls():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.dtype = np.float32
    return _state


def default_dtype():
    """Currently active float dtype (per thread)."""
    return _tls().dtype


def set_default_dtype(name: str) -> None:
    if name not in _FLOAT_DTYPES:
        raise ValueError(f"unknown float dtype {name!r}")
    _tls().dtype = _FLOAT_DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default float dtype ('float32' or 'float64')."""
    tls = _tls()
    old = tls.dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        tls.dtype = old


class Tensor:
    """Dense n-dimensional array with an optional gradient slot.

    Data is immutable by convention after construction except for ``grad``
    (filled by ``backward``) and in-place parameter updates performed by an
    optimizer holding exclusive access.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None
        self.node: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars become constant tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


class _Node:
    __slots__ = ("inputs", "backward")

    def __init__(self, inputs, backward):
        self.inputs = inputs      # tuple of node ids, None for no-grad operands
        self.backward = backward  # grad_out -> tuple of partials aligned with inputs


class Tape:
    """Append-only record of one forward pass.

    Node ids are list indices, so reverse append order is a valid reverse
    topological order. A tape is confined to the thread that opened it and
    is discarded after ``backward``.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tls().tapes.append(self)
        return self

    def __exit__(self, *exc):
        tapes = _tls().tapes
        if tapes and tapes[-1] is self:
            tapes.pop()
        return False

    def _ensure(self, t: Tensor) -> int:
        if t.tape is self and t.node is not None:
            return t.node
        nid = len(self._nodes)
        self._nodes.append(_Node((), None))
        self._leaves[nid] = t
        t.tape = self
        t.node = nid
        return nid

    def _add(self, inputs, backward) -> int:
        nid = len(self._nodes)
        self._nodes.append(_Node(inputs, backward))
        return nid

    def __len__(self) -> int:
        return len(self._nodes)


def active_tape() -> Optional[Tape]:
    tapes = _tls().tapes
    return tapes[-1] if tapes else None


def _record(out_data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(out_data)
    ids = tuple(tape._ensure(p) if p.requires_grad else None for p in parents)
    out = Tensor(out_data, requires_grad=True)
    out.tape = tape
    out.node = tape._add(ids, backward)
    return out


def backward(loss: Tensor) -> dict:
    """Run reverse accumulation from a scalar loss.

    Gradients are added into ``.grad`` of every contributing leaf (so
    repeated calls accumulate, which is what gradient accumulation wants).
    Returns a map of leaf node id to gradient tensor.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    tape = loss.tape
    if tape is None or loss.node is None:
        raise GraphError("loss is not attached to an active tape")
    grads: dict[int, np.ndarray] = {
        loss.node: np.ones_like(loss.data)
    }
    for nid in range(len(tape._nodes) - 1, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape._nodes[nid]
        if node.backward is None:
            # leaf: deposit into the tensor's gradient slot
            leaf = tape._leaves[nid]
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad = leaf.grad + g
            grads[nid] = g  # keep for the returned map
            continue
        partials = node.backward(g)
        for iid, pg in zip(node.inputs, partials):
            if iid is None or pg is None:
                continue
            acc = grads.get(iid)
            grads[iid] = pg if acc is None else acc + pg
    return {nid: Tensor(g) for nid, g in grads.items() if nid in tape._leaves}


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shape_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} "
                         f"are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check(a, b, "add")
    sa, sb = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check(a, b, "sub")
    sa, sb = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape_check(a, b, "div")
    if (b.data == 0).any():
        idx = tuple(np.argwhere(b.data == 0)[0])
        raise DomainError(f"div: zero divisor at index {idx}")
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _record(ad / bd, (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        idx = tuple(np.argwhere(a.data <= 0)[0])
        raise DomainError(f"log: non-positive input at index {idx}")
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _record(np.log(ad), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _record(np.where(mask, a.data, 0), (a,), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _record(-a.data, (a,), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no tensor allocated for c)."""
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _record(a.data * c, (a,), bwd)


# ---------------------------------------------------------------------------
# matmul / reductions / softmax


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-d operands give the standard product; equal-rank
    stacked operands (e.g. heads x L x d) are multiplied batch-wise."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim != bd.ndim:
        raise ShapeError(f"matmul: ranks {ad.ndim} and {bd.ndim} unsupported")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not agree")

    def bwd(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return _record(ad @ bd, (a, b), bwd)


def reduce_sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for rank {a.ndim}")
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def reduce_mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for rank {a.ndim}")
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, shape).copy(),)

    return _record(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    if np.isnan(a.data).any():
        raise DomainError("softmax: NaN in input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: empty input list")
    shapes = [p.data.shape for p in parts]
    base = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(base) or any(i != axis and s[i] != base[i]
                                      for i in range(len(s))):
            raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}")
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(sizes)))

    return _record(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


def slice_axis(a: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    n = a.data.shape[axis]
    if not (0 <= lo <= hi <= n):
        raise ShapeError(f"slice: range [{lo}, {hi}) invalid for axis {axis} "
                         f"of length {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(lo, hi)
    index = tuple(index)
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record(a.data[index], (a,), bwd)


def transpose(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bwd(g):
        return (g.swapaxes(ax1, ax2),)

    return _record(a.data.swapaxes(ax1, ax2), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _record(a.data.reshape(shape), (a,), bwd)


def broadcast_repeat(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and tile the input ``n`` times along it.

    Gradient sums over the inserted axis, routing each copy back to the
    original positions.
    """
    if n < 1:
        raise ShapeError(f"broadcast_repeat: count {n} must be positive")
    expanded = np.expand_dims(a.data, axis)
    out = np.repeat(expanded, n, axis=axis)

    def bwd(g):
        return (g.sum(axis=axis),)

    return _record(out, (a,), bwd)
