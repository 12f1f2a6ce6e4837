"""The finite-difference suite: every differentiable primitive plus the composed block.

Each case builds random double-precision inputs from a seed and a function of
Tensors. Inputs are drawn away from kinks where that is cheap (distinct values
for max/argmax, magnitudes bounded away from zero for ReLU and L1); the checker
skips whatever kinks remain.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .projection import CvpParams, CvtParams, FtvpOptions, Mlp, ftvp_block, init_cvp, init_cvt
from .tensor import Tensor, finite_diff_check, ops

PRIMITIVE_TOL = 1e-5
BLOCK_TOL = 1e-4


@dataclass(frozen=True)
class GradCase:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]
    tol: float = PRIMITIVE_TOL


@dataclass
class CaseResult:
    name: str
    seed: int
    max_rel_error: float
    checked: int
    skipped: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tol


def _away_from_zero(rng, shape, lo=0.1):
    mag = rng.uniform(lo, 1.5, shape)
    return mag * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape, gap=0.05):
    """Values pairwise at least ``gap`` apart so max/argmax cannot flip under a small nudge."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * gap * 2 + rng.uniform(-gap / 4, gap / 4, n)
    return rng.permutation(vals).reshape(shape)


def _featmap(rng, c=2, h=4, w=4, n=1):
    return rng.standard_normal((n, c, h, w))


def _binary(op):
    def build(rng):
        return op, [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]
    return build


def _case_broadcast_add(rng):
    return ops.add, [rng.standard_normal((2, 3, 4)), rng.standard_normal((1, 3, 1))]


def _case_scale(rng):
    c = float(rng.uniform(-2, 2))
    return (lambda x: ops.scale(x, c)), [rng.standard_normal((3, 4))]


def _case_mul_broadcast(rng):
    return ops.mul_broadcast, [_featmap(rng), rng.standard_normal((1, 1, 4, 4))]


def _case_relu(rng):
    return ops.relu, [_away_from_zero(rng, (3, 5))]


def _case_reshape(rng):
    return (lambda x: ops.reshape(x, (6, 2))), [rng.standard_normal((3, 4))]


def _case_transpose(rng):
    return (lambda x: ops.transpose(x, (2, 0, 1))), [rng.standard_normal((2, 3, 4))]


def _case_sum(rng):
    return ops.sum_all, [rng.standard_normal((3, 4))]


def _case_mean(rng):
    return ops.mean_all, [rng.standard_normal((3, 4))]


def _case_add_n(rng):
    return (lambda a, b, c: ops.add_n([a, b, c])), [rng.standard_normal((2, 2)) for _ in range(3)]


def _case_concat(rng):
    return ops.concat_channels, [_featmap(rng, c=2), _featmap(rng, c=3)]


def _case_upsample(rng):
    return ops.upsample2x, [_featmap(rng, h=3, w=3)]


def _case_maxpool(rng):
    return ops.maxpool2x2, [_distinct(rng, (1, 2, 4, 4))]


def _case_batchnorm(rng):
    return ops.batchnorm, [_featmap(rng, c=3), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]


def _case_matmul(rng):
    return ops.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]


def _case_matmul_batched(rng):
    return ops.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))]


def _case_conv3(rng):
    return (lambda x, k: ops.conv2d(x, k, pad=1)), [_featmap(rng, c=2, h=5, w=5), rng.standard_normal((3, 2, 3, 3))]


def _case_conv_strided(rng):
    return (lambda x, k: ops.conv2d(x, k, stride=2, pad=1)), [_featmap(rng, c=2, h=5, w=5),
                                                              rng.standard_normal((2, 2, 3, 3))]


def _case_conv1(rng):
    return ops.conv2d, [_featmap(rng, c=3), rng.standard_normal((2, 3, 1, 1))]


def _case_l2norm(rng):
    return ops.l2_normalize_channel, [_featmap(rng, c=3, h=2, w=3)]


def _case_rowmax(rng):
    return (lambda r: ops.rowwise_max_argmax(r)[0]), [_distinct(rng, (1, 4, 5))]


def _case_gather(rng):
    index = rng.integers(0, 4, (1, 6))
    return (lambda v: ops.gather_rows(v, index)), [rng.standard_normal((1, 4, 3))]


def _case_l1(rng):
    a = rng.standard_normal((2, 3, 3))
    return ops.l1_loss, [a, a + _away_from_zero(rng, a.shape)]


def _case_wce(rng):
    target = rng.integers(0, 3, (1, 4, 4))
    weights = rng.uniform(0.5, 1.5, 3)
    return (lambda lg: ops.weighted_cross_entropy(lg, target, weights)), [_featmap(rng, c=3)]


def _block_case(mode: str, c: int, side: int):
    def build(rng):
        cvp = init_cvp(rng, c, side, side, mode=mode, dtype=np.float64)
        cvt = init_cvt(rng, c, dtype=np.float64)
        weights = [t.data for t in (cvp.fwd.w1, cvp.fwd.b1, cvp.fwd.w2, cvp.fwd.b2,
                                    cvp.bwd.w1, cvp.bwd.b1, cvp.bwd.w2, cvp.bwd.b2,
                                    cvt.proj_k, cvt.proj_q, cvt.proj_v, cvt.fuse)]

        def fn(x, *ws):
            out, cyc = ftvp_block(x, CvpParams(Mlp(*ws[:4]), Mlp(*ws[4:8]), mode), CvtParams(*ws[8:]),
                                  FtvpOptions(mlp_mode=mode))
            # weight the cycle term so its gradient is not swamped by the output's
            return ops.add(ops.reshape(out, (-1,)), ops.reshape(ops.scale(cyc, 3.0), (1,)))

        return fn, [rng.standard_normal((1, c, side, side))] + weights
    return build


CASES: list[GradCase] = [
    GradCase("add", _binary(ops.add)),
    GradCase("add_broadcast", _case_broadcast_add),
    GradCase("sub", _binary(ops.sub)),
    GradCase("mul", _binary(ops.mul)),
    GradCase("scale", _case_scale),
    GradCase("mul_broadcast", _case_mul_broadcast),
    GradCase("relu", _case_relu),
    GradCase("reshape", _case_reshape),
    GradCase("transpose", _case_transpose),
    GradCase("sum_all", _case_sum),
    GradCase("mean_all", _case_mean),
    GradCase("add_n", _case_add_n),
    GradCase("concat_channels", _case_concat),
    GradCase("upsample2x", _case_upsample),
    GradCase("maxpool2x2", _case_maxpool),
    GradCase("batchnorm", _case_batchnorm),
    GradCase("matmul", _case_matmul),
    GradCase("matmul_batched", _case_matmul_batched),
    GradCase("conv2d_3x3", _case_conv3),
    GradCase("conv2d_stride2", _case_conv_strided),
    GradCase("conv2d_1x1", _case_conv1),
    GradCase("l2_normalize_channel", _case_l2norm),
    GradCase("rowwise_max", _case_rowmax),
    GradCase("gather_rows", _case_gather),
    GradCase("l1_loss", _case_l1),
    GradCase("weighted_cross_entropy", _case_wce),
    GradCase("ftvp_block_full", _block_case("full", 2, 4), BLOCK_TOL),
    GradCase("ftvp_block_spatial", _block_case("spatial", 3, 4), BLOCK_TOL),
]


def run_case(case: GradCase, seed: int) -> CaseResult:
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    fn, inputs = case.build(rng)
    res = finite_diff_check(fn, inputs, seed=seed)
    return CaseResult(case.name, seed, res.max_rel_error, res.checked, res.skipped, case.tol)


def run_suite(seeds: Sequence[int] = range(10), names: Sequence[str] | None = None,
              progress: Callable[[CaseResult], None] | None = None) -> tuple[list[CaseResult], float]:
    """Run every selected case over every seed; returns the results and wall time in seconds."""
    chosen = [c for c in CASES if names is None or c.name in names]
    if names is not None and len(chosen) != len(set(names)):
        unknown = sorted(set(names) - {c.name for c in CASES})
        raise KeyError(f"unknown gradcheck case(s): {unknown}")
    start = time.perf_counter()
    results = []
    for case in chosen:
        for seed in seeds:
            r = run_case(case, seed)
            results.append(r)
            if progress:
                progress(r)
    return results, time.perf_counter() - start
