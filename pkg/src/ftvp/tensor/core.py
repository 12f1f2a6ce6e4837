"""Tensor and Tape: the reverse-mode differentiation substrate.

A :class:`Tensor` wraps a numpy array. Primitive operations (see
:mod:`ftvp.tensor.ops`) record themselves on the active :class:`Tape` whenever
one of their inputs requires a gradient; :meth:`Tape.backward` replays the
record in exact reverse order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class NumericError(FloatingPointError):
    """A tensor acquired a NaN or Inf value."""


class TapeError(RuntimeError):
    """Misuse of the tape (e.g. a second backward pass)."""


_state = threading.local()


def _flags():
    if not hasattr(_state, "check_finite"):
        _state.check_finite = True
        _state.grad_enabled = True
        _state.tape = None
        _state.stack = []
    return _state


def set_check_finite(enabled: bool) -> None:
    _flags().check_finite = bool(enabled)


def check_finite_enabled() -> bool:
    return _flags().check_finite


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them."""
    st = _flags()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced by a recorded operation")
        self._tape.backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the functions live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class _Record:
    __slots__ = ("op", "output", "inputs", "backward")

    def __init__(self, op, output, inputs, backward):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed primitives.

    Usable as a context manager; outside any ``with`` block an implicit tape is
    created on demand and replaced once it has been consumed by ``backward``.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        st = _flags()
        st.stack.append(st.tape)
        st.tape = self
        return self

    def __exit__(self, *exc) -> None:
        st = _flags()
        st.tape = st.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def record(self, op: str, output: Tensor, inputs: Sequence[Tensor],
               backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that has already been replayed")
        self.records.append(_Record(op, output, tuple(inputs), backward))
        output._tape = self

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        if self.consumed:
            raise TapeError("backward already ran on this tape; run a new forward pass first")
        if loss._tape is not self:
            raise TapeError("loss tensor was not recorded on this tape")
        if grad is None:
            if loss.size != 1:
                raise TapeError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(loss.data)
        self.consumed = True
        loss.grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
        check = check_finite_enabled()
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise AssertionError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}")
                if check and not np.isfinite(gi).all():
                    raise NumericError(f"non-finite gradient flowing out of {rec.op}"
                                       + (f" into {t.name!r}" if t.name else ""))
                if t.grad is None:
                    t.grad = gi.astype(t.dtype, copy=True)
                else:
                    t.grad += gi
        self.records.clear()


def active_tape() -> Tape:
    st = _flags()
    if st.tape is None or st.tape.consumed:
        if st.stack:
            if st.tape is not None and st.tape.consumed:
                raise TapeError("the enclosing tape was already replayed")
        st.tape = Tape()
    return st.tape


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap a forward result and record it when any input needs a gradient."""
    st = _flags()
    if st.check_finite and not np.isfinite(data).all():
        named = [t.name for t in inputs if t.name]
        raise NumericError(f"{op} produced non-finite values" + (f" (inputs: {', '.join(named)})" if named else ""))
    out = Tensor(data)
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        active_tape().record(op, out, inputs, backward)
    return out
