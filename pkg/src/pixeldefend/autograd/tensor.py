"""Immutable float64 tensors and the tape that records operations on them."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericError

_local = threading.local()


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A dense row-major array of 64-bit floats.

    The wrapped array is read-only; operations always produce new tensors.
    """

    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, name: Optional[str] = None, *, check: bool = True, _own: bool = False):
        if _own and isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64)
        if check:
            _check_finite(arr, name or "tensor")
        arr.flags.writeable = False
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.subtract(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.subtract(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.multiply(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


@dataclass
class Node:
    """One primitive application recorded on a tape."""

    op: str
    inputs: tuple
    output: Tensor
    # backward(grad_out, needs) -> tuple of input gradients (None where not needed)
    backward: Callable


@dataclass
class ComputationTape:
    """Ordered record of primitive operations.

    Use as a context manager; operations executed inside the block are
    appended in execution order, so inputs always precede their consumers.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "ComputationTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def leaves(self) -> list:
        produced = {id(n.output) for n in self.nodes}
        seen, out = set(), []
        for node in self.nodes:
            for t in node.inputs:
                if id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[ComputationTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    out = Tensor(np.asarray(out_data, dtype=np.float64), check=False, _own=True)
    _check_finite(out.data, f"forward of {op}")
    tape = active_tape()
    if tape is not None:
        tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def backward(tape: ComputationTape, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict:
    """Reverse-mode gradients of a scalar ``loss`` recorded on ``tape``.

    Returns a dict keyed by leaf tensor. With ``wrt`` given, only those
    leaves are returned and work for all other leaves is skipped.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    leaves = tape.leaves()
    if wrt is not None:
        wanted = {id(t) for t in wrt}
        targets = [t for t in wrt]
    else:
        wanted = {id(t) for t in leaves}
        targets = leaves

    # forward sweep: which tensors lie on a path from a wanted leaf
    needed = set(wanted)
    for node in tape.nodes:
        if any(id(t) in needed for t in node.inputs):
            needed.add(id(node.output))

    grads: dict = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        needs = tuple(id(t) in needed for t in node.inputs)
        if not any(needs):
            continue
        in_grads = node.backward(g, needs)
        for t, need, ig in zip(node.inputs, needs, in_grads):
            if not need or ig is None:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = ig if prev is None else prev + ig

    result = {}
    for t in targets:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros(t.shape)
        _check_finite(g, f"gradient of {t.name or 'leaf'}")
        result[t] = Tensor(np.asarray(g, dtype=np.float64).reshape(t.shape), check=False, _own=True)
    return result


def grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> tuple:
    """Evaluate ``fn(*inputs)`` on a fresh tape; return (loss, gradients)."""
    with ComputationTape() as tape:
        loss = fn(*inputs)
    g = backward(tape, loss, wrt=inputs)
    return loss, tuple(g[t] for t in inputs)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
