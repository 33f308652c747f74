"""Tensors, parameters and a recording tape for reverse-mode gradients.

Every differentiable op appends ``(output, inputs, backward_fn)`` to the
active :class:`Tape`. Replaying the records in reverse order is a valid
topological order because ops are recorded as they execute.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

from .._validation import UsageError

__all__ = ["Tensor", "Parameter", "Tape", "record", "active_tape", "backward"]

_TAPE_STACK: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    """Trainable tensor with a gradient accumulator and a freeze flag."""

    __slots__ = ("name", "frozen", "version")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name
        self.frozen = frozen
        # bumped on every in-place update; tapes refuse to replay across a bump
        self.version = 0

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def assign(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise ValueError(f"{self.name}: cannot assign shape {values.shape} to {self.data.shape}")
        self.data[...] = values
        self.version += 1

    def __repr__(self) -> str:
        flag = ", frozen" if self.frozen else ""
        return f"Parameter({self.name!r}, shape={self.shape}{flag})"


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[np.ndarray | None]]

_tape_ids = itertools.count()


class Tape:
    """Record of one forward pass; consumed by a single :meth:`backward` call."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self.produced: set[int] = set()
        self.param_versions: dict[int, tuple[Parameter, int]] = {}
        self.consumed = False
        self.id = next(_tape_ids)

    def __enter__(self) -> Tape:
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def add(self, out: Tensor, inputs: tuple[Tensor, ...], fn: BackwardFn) -> None:
        for t in inputs:
            if isinstance(t, Parameter) and id(t) not in self.param_versions:
                self.param_versions[id(t)] = (t, t.version)
        self.records.append((out, inputs, fn))
        self.produced.add(id(out))

    def _needs_grad(self, t: Tensor) -> bool:
        if isinstance(t, Parameter):
            return not t.frozen
        return t.requires_grad or id(t) in self.produced

    def backward(self, output: Tensor, grad) -> None:
        """Accumulate ``d(output . grad)/d(param)`` into every unfrozen parameter.

        Non-parameter tensors created with ``requires_grad=True`` receive
        their gradient in ``.grad`` (overwritten, not accumulated).
        """
        if self.consumed:
            raise UsageError("tape already used for a backward pass")
        for p, v in self.param_versions.values():
            if p.version != v:
                raise UsageError(f"stale tape: parameter {p.name!r} changed since the forward pass")
        self.consumed = True
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != output.shape:
            raise ValueError(f"output gradient shape {grad.shape} != output shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): grad}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            needs = [self._needs_grad(t) for t in inputs]
            if not any(needs):
                continue
            in_grads = fn(g, needs)
            for t, need, gi in zip(inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                if isinstance(t, Parameter):
                    t.grad += gi
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
                if id(t) not in self.produced:
                    leaves[id(t)] = t
        for key, t in leaves.items():
            t.grad = grads.get(key)
        self.records.clear()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.add(out, inputs, fn)
    return out


@contextlib.contextmanager
def no_tape():
    saved = _TAPE_STACK[:]
    _TAPE_STACK.clear()
    try:
        yield
    finally:
        _TAPE_STACK[:] = saved


def backward(tape: Tape, output: Tensor, grad) -> None:
    tape.backward(output, grad)
