"""Front-to-top view projection: cycled view projection (CVP) and the cross-view transformer (CVT).

Feature maps are ``[N, C, h, w]``. A "patch" is one spatial location's channel
vector, so a map flattens to ``h*w`` patches.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor
from .tensor import ops

KV_MODES = {
    "Q-only": ("xp", "xp"),
    "K=X''&V=X''": ("xpp", "xpp"),
    "K=X&V=X": ("x", "x"),
    "K=X''&V=X": ("xpp", "x"),
    "K=X&V=X''": ("x", "xpp"),
}
DEFAULT_KV_MODE = "K=X&V=X''"
MLP_MODES = ("spatial", "full")


def canonical_kv_mode(mode: str) -> str:
    key = mode.replace("″", "''").replace("′", "'").replace(" ", "")
    key = key.replace(",", "&")
    if key.lower() in ("q-only", "qonly", "k=x'&v=x'"):
        return "Q-only"
    if key not in KV_MODES:
        raise ValueError(f"unknown key/value mode {mode!r}; choose one of {list(KV_MODES)}")
    return key


@dataclass
class Mlp:
    """Linear -> ReLU -> Linear."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x2d: Tensor) -> Tensor:
        h = ops.relu(ops.add(ops.matmul(x2d, self.w1), self.b1))
        return ops.add(ops.matmul(h, self.w2), self.b2)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}

    @property
    def in_width(self) -> int:
        return self.w1.shape[0]


@dataclass
class CvpParams:
    fwd: Mlp
    bwd: Optional[Mlp]
    mode: str = "spatial"

    @property
    def hidden_width(self) -> int:
        return self.fwd.w1.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.fwd.named(f"{prefix}.fwd")
        if self.bwd is not None and self.bwd is not self.fwd:
            out.update(self.bwd.named(f"{prefix}.bwd"))
        return out


@dataclass
class CvtParams:
    proj_k: Tensor
    proj_q: Tensor
    proj_v: Tensor
    fuse: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.proj_k": self.proj_k, f"{prefix}.proj_q": self.proj_q,
                f"{prefix}.proj_v": self.proj_v, f"{prefix}.fuse": self.fuse}


@dataclass
class CvtIntermediates:
    R: np.ndarray
    W: np.ndarray
    H: np.ndarray
    T: np.ndarray


@dataclass(frozen=True)
class FtvpOptions:
    """Which parts of the projection module are switched on.

    ``correlation`` enables the CVT residual branch, ``cycle`` the backward MLP
    and its loss, ``selection`` the gather of value patches by argmax index
    (without it the value map enters the fusion spatially aligned).
    """
    mlp_mode: str = "spatial"
    kv_mode: str = DEFAULT_KV_MODE
    correlation: bool = True
    cycle: bool = True
    selection: bool = True
    tie_weights: bool = False

    def __post_init__(self):
        if self.mlp_mode not in MLP_MODES:
            raise ValueError(f"mlp_mode must be one of {MLP_MODES}, got {self.mlp_mode!r}")
        object.__setattr__(self, "kv_mode", canonical_kv_mode(self.kv_mode))
        if not self.cycle and self.correlation and "xpp" in KV_MODES[self.kv_mode]:
            raise ValueError(f"kv_mode {self.kv_mode!r} reads X'' but the cycle structure is disabled")


# ---------------------------------------------------------------------------
# initialisation

def mlp_width(c: int, h: int, w: int, mode: str) -> int:
    return h * w if mode == "spatial" else c * h * w


def init_mlp(rng: np.random.Generator, width: int, hidden: int, dtype=np.float32) -> Mlp:
    def t(a):
        return Tensor(a.astype(dtype), requires_grad=True)
    return Mlp(
        t(rng.standard_normal((width, hidden)) * np.sqrt(2.0 / width)),
        t(np.zeros(hidden)),
        t(rng.standard_normal((hidden, width)) * np.sqrt(1.0 / hidden)),
        t(np.zeros(width)),
    )


def init_cvp(rng: np.random.Generator, c: int, h: int, w: int, mode: str = "spatial",
             hidden: Optional[int] = None, cycle: bool = True, tie_weights: bool = False,
             dtype=np.float32) -> CvpParams:
    width = mlp_width(c, h, w, mode)
    hidden = hidden or max(1, width // 2)
    fwd = init_mlp(rng, width, hidden, dtype)
    if not cycle:
        bwd = None
    elif tie_weights:
        bwd = fwd
    else:
        bwd = init_mlp(rng, width, hidden, dtype)
    return CvpParams(fwd, bwd, mode)


def init_cvt(rng: np.random.Generator, c: int, dtype=np.float32) -> CvtParams:
    def kern(cout, cin, k):
        fan_in = cin * k * k
        return Tensor((rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)).astype(dtype),
                      requires_grad=True)
    return CvtParams(kern(c, c, 1), kern(c, c, 1), kern(c, c, 1), kern(c, 2 * c, 3))


# ---------------------------------------------------------------------------
# CVP

def _apply_mlp(x: Tensor, mlp: Mlp, mode: str) -> Tensor:
    n, c, h, w = x.shape
    rows = (n * c, h * w) if mode == "spatial" else (n, c * h * w)
    if mlp.in_width != rows[1]:
        raise ValueError(f"CVP width mismatch: MLP expects {mlp.in_width}, feature map {x.shape} "
                         f"flattens to {rows[1]} in {mode!r} mode")
    return ops.reshape(mlp(ops.reshape(x, rows)), x.shape)


def cvp_forward(x: Tensor, p: CvpParams) -> tuple[Tensor, Optional[Tensor]]:
    """Project front-view features to the top view and cycle them back: returns ``(X', X'')``."""
    xp = _apply_mlp(x, p.fwd, p.mode)
    xpp = _apply_mlp(xp, p.bwd, p.mode) if p.bwd is not None else None
    return xp, xpp


def cycle_loss(x: Tensor, xpp: Tensor) -> Tensor:
    return ops.l1_loss(x, xpp)


# ---------------------------------------------------------------------------
# CVT

def _patches(x: Tensor) -> Tensor:
    """[N,C,h,w] -> [N, h*w, C]."""
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def cross_view_relevance(q: Tensor, k: Tensor) -> Tensor:
    """Cosine similarity between every query patch (rows) and key patch (columns): [N, hw, hw]."""
    if q.shape != k.shape:
        raise ValueError(f"cross_view_relevance: query {q.shape} and key {k.shape} differ")
    n, c, h, w = q.shape
    qn = _patches(ops.l2_normalize_channel(q))
    kn = ops.reshape(ops.l2_normalize_channel(k), (n, c, h * w))
    return ops.matmul(qn, kn)


def cvt_forward(x: Tensor, xp: Tensor, xpp: Optional[Tensor], p: CvtParams,
                kv_mode: str = DEFAULT_KV_MODE, selection: bool = True
                ) -> tuple[Tensor, CvtIntermediates]:
    """Correlate views, select value patches, and add the fused, attention-weighted branch to ``X'``.

    The front-view map concatenated with the selected features is the key
    source, so the ``Q-only`` wiring reads neither ``X`` nor ``X''``.
    """
    kv_mode = canonical_kv_mode(kv_mode)
    sources = {"x": x, "xp": xp, "xpp": xpp}
    k_src, v_src = (sources[s] for s in KV_MODES[kv_mode])
    if k_src is None or v_src is None:
        raise ValueError(f"kv_mode {kv_mode!r} needs X'' but none was given")
    for name, t in (("X", k_src), ("V", v_src)):
        if t.shape != xp.shape:
            raise ValueError(f"cvt_forward: {name} source {t.shape} != X' {xp.shape}")
    n, c, h, w = xp.shape

    key = ops.conv2d(k_src, p.proj_k)
    query = ops.conv2d(xp, p.proj_q)
    value = ops.conv2d(v_src, p.proj_v)

    rel = cross_view_relevance(query, key)
    attn, index = ops.rowwise_max_argmax(rel)
    if selection:
        picked = ops.gather_rows(_patches(value), index)
        selected = ops.reshape(ops.transpose(picked, (0, 2, 1)), (n, c, h, w))
    else:
        selected = value
    fused = ops.conv2d(ops.concat_channels(k_src, selected), p.fuse, pad=1)
    out = ops.add(xp, ops.mul_broadcast(fused, ops.reshape(attn, (n, 1, h, w))))
    return out, CvtIntermediates(rel.data, attn.data, index, selected.data)


# ---------------------------------------------------------------------------
# the composed block

def ftvp_block(x: Tensor, cvp: CvpParams, cvt: Optional[CvtParams],
               options: FtvpOptions = FtvpOptions()) -> tuple[Tensor, Tensor]:
    """CVP followed by CVT; returns ``(X_out, cycle loss)``."""
    xp, xpp = cvp_forward(x, cvp)
    if options.cycle and xpp is not None:
        cyc = cycle_loss(x, xpp)
    else:
        cyc = Tensor(np.zeros((), dtype=x.dtype))
    if not options.correlation:
        return xp, cyc
    if cvt is None:
        raise ValueError("correlation is enabled but no CVT parameters were given")
    out, _ = cvt_forward(x, xp, xpp, cvt, options.kv_mode, options.selection)
    return out, cyc


def cvt_variant(kv_mode: str, **option_overrides) -> Callable[[Tensor, CvpParams, CvtParams], tuple[Tensor, Tensor]]:
    """An :func:`ftvp_block` wired with the given key/value sources."""
    options = FtvpOptions(kv_mode=kv_mode, **option_overrides)
    return functools.partial(ftvp_block, options=options)
