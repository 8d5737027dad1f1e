"""Dense float64 tensors and a reverse-mode gradient tape.

A ``Tensor`` wraps a numpy array. Operations record themselves on the active
``GradientTape`` only when at least one input requires grad; everything else
is evaluated eagerly as a plain value. Tapes are single use: ``gradient`` and
``backward`` clear the recorded operations.

    with GradientTape() as tape:
        loss = ops.sum(ops.mul(p, p))
    (grad_p,) = tape.gradient(loss, [p])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from kaprompt.errors import UsageError

_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> GradientTape | None:
    tapes = _stack()
    return tapes[-1] if tapes else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_id = None
        self._tape = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the stored values."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from kaprompt.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from kaprompt.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from kaprompt.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from kaprompt.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from kaprompt.numerics import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from kaprompt.numerics import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from kaprompt.numerics import ops
        return ops.index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence]


class GradientTape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        tapes = _stack()
        if tapes and tapes[-1] is self:
            tapes.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, output: Tensor, inputs: tuple, vjp) -> None:
        output.tape_id = len(self._records)
        output._tape = self
        self._records.append(_Record(output, inputs, vjp))

    def clear(self) -> None:
        for rec in self._records:
            rec.output._tape = None
            rec.output.tape_id = None
        self._records = []

    def _accumulate(self, loss: Tensor, keep=frozenset()) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.tape_id is None:
            raise UsageError("loss was not produced under this gradient tape")
        grads = {id(loss): np.ones_like(loss.data)}
        kept = {}
        for rec in reversed(self._records[: loss.tape_id + 1]):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            if id(rec.output) in keep:
                kept[id(rec.output)] = g
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        grads.update(kept)
        return grads

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. each source; zeros where unreachable."""
        grads = self._accumulate(loss, keep=frozenset(id(s) for s in sources))
        self.clear()
        return [np.asarray(grads[id(s)], dtype=np.float64).copy() if id(s) in grads
                else np.zeros_like(s.data) for s in sources]

    def backward(self, loss: Tensor) -> None:
        """Set ``.grad`` on every requires-grad leaf recorded on this tape."""
        produced = {id(r.output) for r in self._records}
        leaves = {}
        for rec in self._records:
            for inp in rec.inputs:
                if inp.requires_grad and id(inp) not in produced:
                    leaves[id(inp)] = inp
        grads = self._accumulate(loss)
        for key, leaf in leaves.items():
            leaf.grad = grads.get(key, np.zeros_like(leaf.data))
        self.clear()


def backward(loss: Tensor) -> None:
    """Backpropagate through the tape that produced ``loss``."""
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise UsageError("no gradient tape recorded this loss")
    loss._tape.backward(loss)


def make_result(data, inputs: tuple, vjp) -> Tensor:
    """Wrap an op result and record it if any input needs a gradient."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out
