"""Dense float tensors with a reverse-mode tape.

A :class:`Tensor` produced by an operation on inputs that require grad holds
a :class:`Node` recording its parents and a closure computing the
vector-Jacobian product.  :func:`backward` walks the reachable nodes in
reverse topological order, accumulating (``+=``) into leaf ``grad`` buffers.

A backward pass without ``retain`` releases every closure it visited, so a
second pass over the same nodes raises :class:`GraphConsumedError`.  With
``retain=True`` the closures stay alive and a second pass is valid; this is
what the sequential dual-backward relies on.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True
_dtype = np.dtype(DTYPE)


class GraphConsumedError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def get_dtype() -> np.dtype:
    """Floating dtype new tensors are created with (float64 unless overridden)."""
    return _dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Create tensors with ``dtype`` inside the block (float32 trades accuracy for speed)."""
    global _dtype
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dt}")
    prev = _dtype
    _dtype = dt
    try:
        yield
    finally:
        _dtype = prev


class Node:
    __slots__ = ("parents", "fn", "op")

    def __init__(self, parents: tuple, fn: Callable, op: str):
        self.parents = parents
        self.fn = fn
        self.op = op

    def release(self) -> None:
        self.fn = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd -------------------------------------------------------------
    def backward(self, retain: bool = False) -> None:
        backward(self, retain=retain)

    # -- operator sugar (implementations live in ops) -------------------------
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

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

    def exp(self):
        from . import ops
        return ops.exp(self)

    def sqrt(self):
        from . import ops
        return ops.sqrt(self)


def _bad_item(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording a node when any parent needs grad."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = req
    out.grad = None
    out.name = None
    out.node = Node(tuple(parents), fn, op) if req else None
    return out


def _topo_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, retain: bool = False, grad_output: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1 and grad_output is None:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict = {id(loss): np.ones_like(loss.data) if grad_output is None else np.asarray(grad_output, loss.data.dtype)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        if node is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
            continue
        if node.fn is None:
            raise GraphConsumedError(
                f"graph consumed: node '{node.op}' was released by a previous backward "
                "pass; call backward(retain=True) to keep it"
            )
        in_grads = node.fn(g)
        for p, pg in zip(node.parents, in_grads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    if not retain:
        for t in order:
            if t.node is not None:
                t.node.release()


def release_graph(root: Tensor) -> None:
    """Drop saved intermediates of every node reachable from ``root``.

    Traversal stops at nodes that are already released: everything above
    them was released by the same earlier pass.
    """
    stack = [root]
    seen: set = set()
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or node.fn is None or id(t) in seen:
            continue
        seen.add(id(t))
        node.release()
        stack.extend(node.parents)
