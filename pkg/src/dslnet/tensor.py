"""Dense tensor with a reverse-mode gradient tape.

Storage is float32 by default. ``precision(np.float64)`` switches the dtype
used for newly created tensors, which the gradient checker relies on.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_state = {"dtype": np.float32, "grad_enabled": True}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def grad_enabled() -> bool:
    return _state["grad_enabled"]


class GraphError(RuntimeError):
    pass


class Tensor:
    """An n-d array (rank 4 for feature maps) that records how it was made.

    ``_backward`` maps the upstream gradient to one gradient per parent
    (``None`` for parents that need none).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, *, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._consumed = False

    # -- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._consumed = False
        track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autograd --------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode accumulation into every ``requires_grad`` leaf.

        The graph is released afterwards; calling backward again raises.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a single-element loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() already ran on this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor with requires_grad=True")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if node._consumed and node is not self:
                raise GraphError(f"graph node '{node.op}' was already consumed by an earlier backward()")
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.astype(node.data.dtype, copy=False) if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise GraphError(f"op '{node.op}' produced gradient {pg.shape} for input {p.shape}")
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
        for node in order:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._consumed = True
        self._consumed = True

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return total(self)

    def mean(self) -> "Tensor":
        return mean(self)


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


def _cast(g: np.ndarray, like: Tensor) -> np.ndarray:
    return g.astype(like.data.dtype, copy=False)


# -- elementwise / structural ops ---------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def backward(g):
        return _cast(unbroadcast(g, a.shape), a), _cast(unbroadcast(g, b.shape), b)

    return Tensor._make(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.data * b.data

    def backward(g):
        ga = _cast(unbroadcast(g * b.data, a.shape), a) if a.requires_grad else None
        gb = _cast(unbroadcast(g * a.data, b.shape), b) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),), "scale")


def total(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype).reshape(())

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return Tensor._make(out, (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype).reshape(())

    def backward(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.data.dtype),)

    return Tensor._make(out, (a,), backward, "mean")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tensors, backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Split along ``axis`` into pieces of the given sizes."""
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not add up to extent {a.shape[axis]} on axis {axis}")
    starts = np.concatenate([[0], np.cumsum(sizes)])
    pieces = []
    for lo, hi in zip(starts[:-1], starts[1:]):
        index = [slice(None)] * a.ndim
        index[axis] = slice(int(lo), int(hi))
        pieces.append(take_slice(a, tuple(index)))
    return pieces


def take_slice(a: Tensor, index: tuple) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return Tensor._make(out, (a,), backward, "slice")


def stack_sum(tensors: Iterable[Tensor]) -> Tensor:
    it = iter(tensors)
    acc = next(it)
    for t in it:
        acc = add(acc, t)
    return acc


# -- debug dump ---------------------------------------------------------------

_DUMP_HEADER = struct.Struct("<4I")


def dump_tensor(t: Tensor | np.ndarray, path: str | Path) -> None:
    """Write a rank-4 tensor as a 16-byte extent header plus little-endian float32 data."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 4:
        raise ValueError(f"debug dump expects a rank-4 tensor, got rank {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(*arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path: str | Path) -> Tensor:
    raw = Path(path).read_bytes()
    shape = _DUMP_HEADER.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f4", offset=_DUMP_HEADER.size)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: header extents {shape} do not match {data.size} stored values")
    return Tensor(data.reshape(shape).astype(np.float32), dtype=np.float32)


def graph_ops(root: Tensor) -> set[str]:
    """Names of every op reachable from ``root`` in a recorded graph."""
    return {node.op for node in _topo_order(root)}
