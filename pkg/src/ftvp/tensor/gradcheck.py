"""Central finite-difference verification of backward rules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Tape, Tensor, no_grad
from . import ops

# entries whose analytic and numeric gradients are both below this are compared absolutely
REL_FLOOR = 1e-4


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int


def _scalarize(out: Tensor, proj: np.ndarray) -> Tensor:
    if out.size == 1:
        return ops.reshape(out, ())
    return ops.sum_all(ops.mul(out, Tensor(proj)))


def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
                      seed: int = 0, kink_tol: float = 1e-7) -> GradCheckResult:
    """Compare the analytic gradient of ``fn`` against central differences.

    Non-scalar outputs are reduced with a fixed random projection. An entry is
    skipped when the second difference ``f(x+h) - 2 f(x) + f(x-h)`` is far
    larger than smooth curvature allows, which flags a kink (ReLU, max/argmax
    switch) within ``h`` of the point.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)

    with no_grad():
        probe = fn(*[Tensor(a) for a in arrays])
    proj = rng.standard_normal(probe.shape) if probe.size > 1 else None

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = _scalarize(fn(*tensors), proj)
    tape.backward(loss)
    f0 = float(loss.data)

    def f(vals):
        with no_grad():
            return float(_scalarize(fn(*[Tensor(v) for v in vals]), proj).data)

    worst, checked, skipped = 0.0, 0, 0
    for k, (arr, t) in enumerate(zip(arrays, tensors)):
        analytic = t.grad if t.grad is not None else np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f(arrays)
            arr[idx] = orig - h
            fm = f(arrays)
            arr[idx] = orig
            if abs(fp - 2.0 * f0 + fm) > kink_tol * max(1.0, abs(f0)):
                skipped += 1
                continue
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(worst, checked, skipped)
