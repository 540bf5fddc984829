"""Dense tensors with a reverse-mode gradient tape, and trainable parameters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NumericalError, ValidationError

PRECISIONS = {"single": np.float32, "double": np.float64}


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ValidationError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def check_finite(array: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"non-finite values produced by {where}")


class Tensor:
    """N-dimensional float array plus an optional gradient buffer.

    Tensors produced by differentiable ops remember their parents and a
    closure mapping the upstream gradient to one gradient per parent;
    :meth:`backward` replays that tape in reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 precision: Optional[str] = None):
        arr = np.asarray(data)
        if precision is not None:
            arr = arr.astype(dtype_for(precision), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.require(arr, requirements="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "double" if self.data.dtype == np.float64 else "single"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into the ``grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValidationError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ValidationError(f"upstream gradient shape {grad.shape} != tensor shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


@dataclass
class Parameter:
    """A named trainable tensor together with its Adam moment buffers."""

    name: str
    value: Tensor
    frozen: bool = False
    adam_m: np.ndarray = field(default=None, repr=False)
    adam_v: np.ndarray = field(default=None, repr=False)
    step_count: int = 0

    def __post_init__(self):
        self.value.requires_grad = True
        self.value.name = self.name
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value.data)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value.data)
        if self.adam_m.shape != self.value.shape or self.adam_v.shape != self.value.shape:
            raise ValidationError(f"Adam buffers for {self.name} do not match shape {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None
