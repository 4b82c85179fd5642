"""Tensor values and the tape that records operations on them."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


def _float_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype if dtype is not None else getattr(_state, "dtype", DEFAULT_DTYPE))
    if dt not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dt}")
    return dt


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (e.g. float64 for gradient checks)."""
    prev = getattr(_state, "dtype", DEFAULT_DTYPE)
    _state.dtype = _float_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """An immutable n-d array of reals.

    The data buffer is marked read-only; operations always produce new tensors.
    Leaves created with ``requires_grad=True`` are the trainable parameters.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        src = np.asarray(data)
        if dtype is None and src.dtype in (np.float32, np.float64):
            dt = src.dtype
        else:
            dt = _float_dtype(dtype)
        arr = np.array(src, dtype=dt, copy=True)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor dims must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # fresh op outputs are owned by the tensor; skip the defensive copy
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


class Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self.out = out
        self.parents = tuple(parents)
        self.backward = backward


class Tape:
    """Ordered record of the primitive operations executed while it is active.

    Use as a context manager; operations whose inputs need gradients are
    appended in execution order, so parents always precede children.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(Node(out, parents, backward))
        self._tracked.add(id(out))


def _tape_stack() -> list[Tape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Run operations without recording, e.g. for target-network passes."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


class Gradients:
    """Gradient lookup returned by :func:`backward`.

    Indexing with a tensor that was not on the path to the loss yields zeros.
    """

    def __init__(self, grads: dict[int, np.ndarray], keep: dict[int, Tensor]):
        self._grads = grads
        self._keep = keep

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._keep.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self._keep.get(id(t)) is t

    def __len__(self) -> int:
        return len(self._keep)


def backward(loss: Tensor, tape: Tape) -> Gradients:
    """Reverse sweep over ``tape`` from a scalar ``loss``.

    Returns gradients for every leaf that requires grad and fed into the loss.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not tape.tracks(parent):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.requires_grad:
                leaves[key] = parent
    leaf_grads = {k: grads[k] for k in leaves if k in grads}
    return Gradients(leaf_grads, leaves)
