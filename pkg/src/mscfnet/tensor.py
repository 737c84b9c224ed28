"""Tensor, Parameter and the reverse-mode tape.

Ops record themselves on the innermost active :class:`Tape` (see
``with Tape() as tape:``). With no tape active, ops run forward only, which
is how evaluation avoids keeping intermediates alive.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's preconditions."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._recorded = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named tensor owned by a model.

    Non-trainable parameters (batch-norm running statistics) live in the same
    store so that they are saved with the weights, but optimizers and the
    parameter census skip them.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of primitive applications for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        out._recorded = True
        self.nodes.append(_Node(out, tuple(inputs), backward_fn, op))

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def current_tape() -> Optional[Tape]:
    st = _stack()
    return st[-1] if st else None


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op's output and record it if any input is tracked."""
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, inputs, backward_fn, op)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) through ``tape`` in reverse order.

    Gradients of leaves (parameters and user tensors with ``requires_grad``)
    are accumulated into ``.grad``. A tape can be consumed only once.
    """
    if tape.consumed:
        raise RuntimeError("backward() called twice on the same tape without reset()")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not loss._recorded:
        raise RuntimeError("loss was not produced on this tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._recorded:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
        node.backward_fn = None
    tape.nodes = []


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
