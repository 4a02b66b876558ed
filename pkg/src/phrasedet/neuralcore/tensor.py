"""Tensors and the tape that records operations for reverse-mode AD.

Operations only record onto a tape when one is active (``with Tape() as tape``)
and at least one input requires a gradient; outside a tape every op is a plain
numpy computation, which is what inference uses.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar, resolved lazily to avoid an import cycle
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

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records the operation graph of one forward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_tape:
    """Suspend recording inside a tape context."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


def record(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.is_leaf = False
        tape.nodes.append((out, tuple(parents), fn))
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that needs it.

    Nodes are replayed in exact reverse recording order, which is a reverse
    topological order because an op can only consume already-recorded values.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.data)
    for out, parents, fn in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        grads = fn(g)
        for p, gp in zip(parents, grads):
            if gp is None or not p.requires_grad:
                continue
            if gp.shape != p.data.shape:
                raise RuntimeError(f"gradient shape {gp.shape} != value shape {p.data.shape}")
            if p.grad is None:
                p.grad = gp.copy() if p.is_leaf else gp
            else:
                p.grad = p.grad + gp
        out.grad = None
    tape.nodes.clear()
