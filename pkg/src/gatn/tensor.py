"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every differentiable operation executed while it is
active. :func:`backward` walks that record once, in reverse, and accumulates
gradients into every ``requires_grad`` tensor it reaches (intermediates
included, which is what lets the attention code read the gradient of an
activation directly).
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}


class TensorError(ValueError):
    """Shape or state violation inside the tensor library."""


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise TensorError(f"unknown element type {dtype!r}; expected one of {sorted(DTYPES)}")
    return np.dtype(dtype)


class Tensor:
    """An n-d float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise TensorError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class _Record:
    __slots__ = ("inputs", "output", "backward_fn", "op")

    def __init__(self, inputs, output, backward_fn, op):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.op = op


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; ops run inside the ``with`` block are recorded
    when at least one of their inputs requires a gradient.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.traversals = 0
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def __len__(self):
        return len(self.records)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        self.records.append(_Record(tuple(inputs), output, backward_fn, op))
        self._outputs.add(id(output))

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the result of ``op`` and record it on the active tape.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    tape = active_tape()
    if needs and tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` for every tensor on ``tape`` that ``loss`` depends on.

    Gradients accumulate, so a tensor used twice receives both contributions.
    """
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.owns(loss):
        raise TensorError("loss was not produced on this tape")
    tape.traversals += 1
    loss._accumulate(np.ones_like(loss.data))
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if not np.all(np.isfinite(gi)):
                raise FloatingPointError(f"non-finite gradient flowing out of {rec.op}")
            t._accumulate(np.asarray(gi, dtype=t.data.dtype))
