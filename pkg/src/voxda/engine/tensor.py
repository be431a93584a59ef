"""Dense tensors with reverse-mode automatic differentiation.

The carrier type is :class:`Tensor`, a thin wrapper around a row-major numpy
array plus an optional record of the operation that produced it.  Gradients
are themselves Tensors: when ``backward`` runs with ``retain_secondary=True``
the vector-Jacobian products are recorded like any other op, so a scalar
function of a gradient can be backpropagated once more (double backward).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional

import numpy as np

DEFAULT_DTYPE = np.float64

_ALLOWED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NumericDomainError(ValueError):
    """An op was evaluated outside its numeric domain (e.g. log of <= 0)."""


class GraphFreedError(RuntimeError):
    """Backward reached a node whose graph was already released."""


class UnsupportedOpError(RuntimeError):
    """A graph contains an op outside the certified second-order set."""


_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    """Force graph recording inside the block (overrides an outer no_grad)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


class OpNode:
    """One recorded op: name, parent tensors, and the VJP closure.

    ``vjp(grad_out)`` returns one gradient Tensor (or None) per parent.  VJPs
    are written in terms of engine ops, which is what makes the backward pass
    itself differentiable.
    """

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class _Freed:
    """Sentinel marking a node whose graph has been released."""

    __slots__ = ()


_FREED = _Freed()


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    The value buffer is immutable by convention once the tensor has entered a
    graph; only ``grad`` is assigned after creation.  Tensors compare and hash
    by identity so they can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None
        self._ctx: Optional[OpNode] = None

    # -- basic introspection -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the value buffer (do not mutate)."""
        return self.data

    def detach(self) -> "Tensor":
        """Same values, no graph attachment, no gradient requirement."""
        return Tensor(self.data)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if self._ctx is not None:
            raise RuntimeError("requires_grad_ is only valid on leaf tensors")
        self.requires_grad = flag
        return self

    def is_leaf(self) -> bool:
        return self._ctx is None

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_secondary: bool = False) -> dict:
        return backward(self, retain_secondary=retain_secondary)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # Operator sugar is attached by voxda.engine.ops at import time (the op
    # implementations live there to keep this module free of math).


def make_result(data: np.ndarray, op: str, parents: Iterable[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, recording the graph node when tracking is active."""
    parents = tuple(parents)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._ctx = OpNode(op, parents, vjp)
    return out


def _toposort(root: Tensor) -> list:
    """Return graph nodes reachable from root, parents before children."""
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        ctx = node._ctx
        if isinstance(ctx, _Freed):
            raise GraphFreedError(
                "backward reached a freed graph; rebuild the forward pass or "
                "use retain_secondary on the first backward"
            )
        stack.append((node, True))
        if ctx is not None:
            for p in ctx.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, retain_secondary: bool = False) -> dict:
    """Reverse-mode differentiation of a scalar loss.

    Returns a gradient map {leaf tensor -> gradient Tensor} covering every
    reachable leaf with ``requires_grad``.  The same gradients are accumulated
    into each leaf's ``grad`` attribute.

    With ``retain_secondary`` the VJP computations are recorded, so the
    returned gradients are graph nodes that can be backpropagated again; the
    forward graph is kept alive in that case.  Without it the traversed graph
    is released and a second backward through it raises GraphFreedError.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to differentiate")

    from . import ops  # local import: ops depends on this module

    order = _toposort(loss)
    grads: dict = {loss: Tensor(np.ones_like(loss.data))}
    with _grad_mode(retain_secondary):
        for node in reversed(order):
            g = grads.get(node)
            if g is None:
                continue
            ctx = node._ctx
            if ctx is None:
                continue
            parent_grads = ctx.vjp(g)
            for parent, pg in zip(ctx.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(parent)
                grads[parent] = pg if acc is None else ops.add(acc, pg)
            if node is not loss:
                del grads[node]

    leaf_grads = {t: g for t, g in grads.items() if t._ctx is None and t.requires_grad}
    for t, g in leaf_grads.items():
        t.grad = g if t.grad is None else ops.add(t.grad, g)
    if not retain_secondary:
        for node in order:
            if node._ctx is not None:
                node._ctx = _FREED
    return leaf_grads


def collect_graph_ops(root: Tensor) -> set:
    """Names of all ops in the graph below root (for certification checks)."""
    names = set()
    for node in _toposort(root):
        if node._ctx is not None:
            names.add(node._ctx.op)
    return names
