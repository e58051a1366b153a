"""Dense array carrier with an optional gradient slot and a recorded op graph."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def check_mode():
    """64-bit precision used only for finite-difference gradient verification."""
    prev = default_dtype()
    _state.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _state.dtype = prev


class NdArray:
    """Row-major real array; tracked arrays accumulate ``grad`` during backward."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward", "_forward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[NdArray, ...] = ()
        self.op = "leaf"
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._forward: Callable[..., np.ndarray] | None = None

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
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "NdArray":
        return NdArray(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"NdArray(shape={self.shape}, op={self.op!r}{flag})"

    # operator sugar, implemented in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_array(x) -> NdArray:
    if isinstance(x, NdArray):
        return x
    return NdArray(x)


def make_node(data: np.ndarray, parents: Iterable[NdArray], op: str, backward, forward=None) -> NdArray:
    """Wrap an op result; records the graph edge only when some input is tracked."""
    out = NdArray.__new__(NdArray)
    out.data = data
    out.grad = None
    out.op = op
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward
        out._forward = forward
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
        out._forward = None
    return out


class Graph:
    """Topologically ordered op records reachable from a set of outputs."""

    def __init__(self, outputs: Sequence[NdArray]):
        self.outputs = list(outputs)
        order: list[NdArray] = []
        seen: set[int] = set()
        for root in self.outputs:
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
                for p in node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self.nodes = order
        self._index = {id(n): i for i, n in enumerate(order)}

    def node_id(self, node: NdArray) -> int:
        return self._index[id(node)]

    def leaves(self) -> list[NdArray]:
        return [n for n in self.nodes if n.is_leaf]

    def records(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n.op, tuple(self._index[id(p)] for p in n.parents)) for n in self.nodes]

    def replay(self) -> list[np.ndarray]:
        """Recompute every interior node from its leaves; returns output data."""
        values: dict[int, np.ndarray] = {}
        for n in self.nodes:
            if n.is_leaf or n._forward is None:
                values[id(n)] = n.data
            else:
                values[id(n)] = n._forward(*(values[id(p)] for p in n.parents))
        return [values[id(o)] for o in self.outputs]


def backward(loss: NdArray, leaves: Sequence[NdArray] | None = None) -> list[np.ndarray]:
    """Reverse-mode accumulation of d(loss)/d(leaf) into ``leaf.grad``.

    Gradients accumulate (call ``zero_grad`` between steps). Leaves in
    ``leaves`` that the graph never touches receive a zero gradient. Returns
    the gradients of ``leaves`` in order (empty list when not given).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph([loss])
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.astype(node.data.dtype, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    out = []
    for leaf in leaves or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        out.append(leaf.grad)
    return out
