"""Dense float32 tensors and a define-by-run reverse-mode tape."""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, MissingNodeError

DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major float32 array with an optional gradient buffer.

    ``node_id`` is set while the tensor takes part in the active tape.
    """

    __slots__ = ("values", "requires_grad", "grad", "node_id", "name", "_tape_key")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.name = name
        self._tape_key: int | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got dims {self.dims}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.mul(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    node_id: int
    inputs: tuple[int, ...]
    output: Tensor
    backward: BackwardRule | None  # None for leaves
    kind: str = "leaf"


@dataclass
class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; ops executed inside record onto it.
    """

    nodes: list[Node] = field(default_factory=list)
    _key: int = field(default_factory=lambda: next(_TAPE_KEYS))
    _index: dict = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _new_id(self) -> int:
        return len(self.nodes)

    def owns(self, t: Tensor) -> bool:
        return t._tape_key == self._key and t.node_id is not None

    def register_leaf(self, t: Tensor) -> int:
        if self.owns(t):
            return t.node_id
        nid = self._new_id()
        node = Node(nid, (), t, None)
        self.nodes.append(node)
        self._index[nid] = node
        t.node_id = nid
        t._tape_key = self._key
        return nid

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, rule: BackwardRule) -> None:
        ids = tuple(self.register_leaf(t) if t.requires_grad else -1 for t in inputs)
        nid = self._new_id()
        node = Node(nid, ids, output, rule, kind)
        self.nodes.append(node)
        self._index[nid] = node
        output.node_id = nid
        output._tape_key = self._key
        output.requires_grad = True


_TAPE_KEYS = itertools.count(1)


def backward(tape: Tape, root: Tensor) -> None:
    """Populate ``grad`` of every requires_grad tensor reachable from ``root``.

    Gradients are added to any existing ``grad`` buffer.
    """
    if root.values.size != 1:
        raise ContractError(f"backward needs a scalar root, got dims {root.dims}")
    if not tape.owns(root):
        raise MissingNodeError("root tensor is not recorded on this tape")

    grads: dict[int, np.ndarray] = {root.node_id: np.ones(root.dims, dtype=DTYPE)}
    for node in reversed(tape.nodes[: root.node_id + 1]):
        g = grads.get(node.node_id)
        if g is None or node.backward is None:
            continue
        in_grads = node.backward(g)
        for nid, ig in zip(node.inputs, in_grads):
            if nid < 0 or ig is None:
                continue
            prev = grads.get(nid)
            grads[nid] = ig.astype(DTYPE, copy=False) if prev is None else prev + ig

    for node in tape.nodes[: root.node_id + 1]:
        if node.backward is not None:
            continue
        t = node.output
        if not t.requires_grad:
            continue
        g = grads.get(node.node_id)
        if g is None:
            g = np.zeros(t.dims, dtype=DTYPE)
        t.grad = g.copy() if t.grad is None else t.grad + g
