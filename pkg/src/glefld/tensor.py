"""Dense float64 tensors, named parameters, and the define-by-run gradient tape."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation sees or produces NaN/Inf."""


class Tensor:
    """Immutable-by-convention wrapper around a float64 ndarray.

    ``requires_grad`` marks a leaf whose gradient should be filled in by
    :meth:`GradTape.backward`; outputs of recorded ops inherit it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the functional forms live in glefld.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, _wrap(other))

    def __radd__(self, other):
        from . import ops
        return ops.add(_wrap(other), self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _wrap(other))

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, _wrap(other))

    def __rmul__(self, other):
        from . import ops
        return ops.mul(_wrap(other), self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, Tensor(-1.0))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter(Tensor):
    """A trainable tensor with a unique dotted name and an accumulated gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Record:
    """One executed differentiable op: ``backward(grad_out)`` -> grads per input."""

    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_TAPES: list = []


def active_tape() -> Optional["GradTape"]:
    return _TAPES[-1] if _TAPES else None


@dataclass
class GradTape:
    """Ordered log of differentiable ops executed while the tape is active.

    Usage::

        with GradTape() as tape:
            loss = f(x)
        tape.backward(loss)
    """

    records: list = field(default_factory=list)
    visited: list = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, rec: Record) -> None:
        self.records.append(rec)

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """Propagate ``d loss`` back through the recorded ops in reverse order.

        Parameter gradients are accumulated into ``Parameter.grad``; other
        leaves with ``requires_grad`` get their ``grad`` overwritten.
        """
        if grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss or an explicit grad, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(grad, dtype=np.float64)}
        produced = {id(r.output) for r in self.records}
        leaves = {}
        self.visited = []
        for idx in range(len(self.records) - 1, -1, -1):
            rec = self.records[idx]
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            self.visited.append(idx)
            for t, g in zip(rec.inputs, rec.backward(g_out)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in produced:
                    prev = grads.get(key)
                    grads[key] = g if prev is None else prev + g
                elif isinstance(t, Parameter):
                    t.grad = t.grad + g
                else:
                    prev = leaves.get(key)
                    leaves[key] = (t, g if prev is None else prev[1] + g)
        for t, g in leaves.values():
            t.grad = g
