"""Dense tensors and a tape-based reverse-mode autodiff graph.

Operations only record themselves when a :class:`Graph` is active
(``with Graph() as g: ...``) and at least one input requires a gradient.
Outside a graph every op is a plain numpy forward pass, which is what the
evaluation paths use.
"""
from __future__ import annotations

import threading
import weakref
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

_DTYPE = np.float64


def default_dtype() -> type:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the engine between float64 (default) and float32."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DTYPE = dtype


class AutodiffError(RuntimeError):
    pass


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class Tensor:
    """An n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Node:
    """One recorded primitive: output = kind(inputs).

    The output is held weakly; a strong reference would form a
    tensor/node cycle that keeps every intermediate array alive until the
    cyclic collector happens to run.
    """

    __slots__ = ("kind", "inputs", "_output", "output_id", "backward_fn", "index")

    def __init__(self, kind: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]], index: int):
        self.kind = kind
        self.inputs = tuple(inputs)
        self._output = weakref.ref(output)
        self.output_id = id(output)
        self.backward_fn = backward_fn
        self.index = index

    @property
    def output(self) -> Optional[Tensor]:
        return self._output()


_local = threading.local()


def _stack() -> List["Graph"]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_graph() -> Optional["Graph"]:
    st = _stack()
    return st[-1] if st else None


class Graph:
    """Append-only tape of primitive nodes.

    Nodes are recorded in execution order, so the tape is already a
    topological order and the backward sweep simply walks it in reverse.
    A graph belongs to the thread that created it.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> Node:
        for t in inputs:
            node = t._node
            if node is not None and (node.index >= len(self.nodes) or self.nodes[node.index] is not node):
                raise AutodiffError(f"{kind}: input produced outside this graph")
        node = Node(kind, inputs, output, backward_fn, len(self.nodes))
        self.nodes.append(node)
        output._node = node
        output.requires_grad = True
        return node

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        return backward(self, loss)


def make_output(kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(data)
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        g.record(kind, inputs, out, backward_fn)
    return out


def backward(graph: Graph, loss: Tensor) -> Dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Writes ``d(loss)/d(leaf)`` into ``leaf.grad`` (overwriting any previous
    value) for every leaf with ``requires_grad`` that the loss depends on,
    and returns the same arrays keyed by ``id(leaf)``.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not graph.nodes:
        raise AutodiffError("backward called before any forward op was recorded")
    node = loss._node
    if node is None or node.index >= len(graph.nodes) or graph.nodes[node.index] is not node:
        raise AutodiffError("loss was not produced by a forward pass on this graph")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for n in reversed(graph.nodes[: node.index + 1]):
        if n.output is None:  # collected, so nothing downstream can depend on it
            continue
        g_out = grads.pop(n.output_id, None)
        if g_out is None:
            continue
        in_grads = n.backward_fn(g_out)
        for t, g in zip(n.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise AutodiffError(f"{n.kind}: gradient shape {g.shape} != input shape {t.data.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if t._node is None:
                leaves[key] = t
    out = {}
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads[key], dtype=leaf.data.dtype)
        out[key] = leaf.grad
    return out
