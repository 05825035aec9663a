"""Tensor, Parameter, and the gradient tape.

Tensors wrap contiguous float64 arrays. Differentiable ops executed while a
tape is active append records holding the output, the inputs, and a closure
computing input gradients from the output gradient. `backward` replays the
records in exact reverse execution order and deposits gradients on leaf
tensors; Parameters expose that buffer as their persistent `.grad`, which
accumulates across backward calls until an optimizer step zeroes it.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from mlfd.errors import NumericError, ShapeError


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A trainable (or frozen) tensor with a persistent gradient buffer.

    Frozen parameters never request gradients, so backward performs no
    gradient storage writes for them and optimizers skip them entirely.
    """

    __slots__ = ("value", "frozen", "name")

    def __init__(self, value, frozen: bool = False, name: str = ""):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.frozen = bool(frozen)
        self.name = name
        self.value.requires_grad = not self.frozen
        self.value.grad = np.zeros_like(self.value.data)

    @property
    def grad(self) -> Tensor:
        # View over the accumulation buffer; shape always matches value.
        return Tensor(self.value.grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.value.grad[...] = 0.0

    def freeze(self):
        self.frozen = True
        self.value.requires_grad = False

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape}, frozen={self.frozen})"


class _Record:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops executed under this tape."""

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.pop()
        return False

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self._records.append(_Record(output, tuple(inputs), backward_fn))

    def clear(self):
        """Release all recorded intermediates and allow reuse."""
        self._records.clear()
        self._consumed = False

    def __len__(self):
        return len(self._records)


_ACTIVE: list[Tape] = []


def tape_scope(tape: Tape) -> Tape:
    """Alias so `with tape_scope(Tape()) as t:` reads naturally at call sites."""
    return tape


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn, name: str) -> Tensor:
    """Wrap an op result, enforce finiteness, and register on the active tape."""
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by op '{name}'")
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep: accumulate gradients of `loss` onto every reachable
    leaf tensor that requires grad. The tape is consumed; replaying without
    `tape.clear()` raises to prevent silent double accumulation."""
    if tape._consumed:
        raise NumericError("backward called twice on the same tape without reset")
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced = {id(rec.output) for rec in tape._records}

    for rec in reversed(tape._records):
        gout = grads.pop(id(rec.output), None)
        holders.pop(id(rec.output), None)
        if gout is None:
            continue
        input_grads = rec.backward_fn(gout)
        for inp, gin in zip(rec.inputs, input_grads):
            if gin is None or not inp.requires_grad:
                continue
            if gin.shape != inp.data.shape:
                raise ShapeError(
                    f"backward produced grad of shape {gin.shape} for input of shape {inp.data.shape}"
                )
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
                holders[key] = inp

    for key, g in grads.items():
        leaf = holders[key]
        if key in produced or not leaf.requires_grad:
            continue
        if leaf.grad is None:
            leaf.grad = g.copy()
        else:
            leaf.grad += g

    tape._consumed = True
    tape._records.clear()
