"""Differentiable primitives.

Feature maps use the ``[N, C, h, w]`` layout (a leading batch axis; every
contract also holds per sample with ``N == 1``). Each primitive computes its
forward value with numpy and registers an exact backward rule on the tape.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, make_output

L2_EPS = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_featmap(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op}: expected a [N, C, h, w] feature map, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise / structural

def add(x: Tensor, y: Tensor) -> Tensor:
    try:
        out = x.data + y.data
    except ValueError as e:
        raise ValueError(f"add: incompatible shapes {x.shape} and {y.shape}") from e
    xs, ys = x.shape, y.shape
    return make_output("add", out, (x, y),
                       lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)))


def sub(x: Tensor, y: Tensor) -> Tensor:
    try:
        out = x.data - y.data
    except ValueError as e:
        raise ValueError(f"sub: incompatible shapes {x.shape} and {y.shape}") from e
    xs, ys = x.shape, y.shape
    return make_output("sub", out, (x, y),
                       lambda g: (_unbroadcast(g, xs), -_unbroadcast(g, ys)))


def mul(x: Tensor, y: Tensor) -> Tensor:
    try:
        out = x.data * y.data
    except ValueError as e:
        raise ValueError(f"mul: incompatible shapes {x.shape} and {y.shape}") from e
    xd, yd = x.data, y.data
    return make_output("mul", out, (x, y),
                       lambda g: (_unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_output("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def mul_broadcast(x: Tensor, w: Tensor) -> Tensor:
    """Multiply every channel of ``x`` [N,C,h,w] by the single-channel map ``w`` [N,1,h,w]."""
    _check_featmap(x, "mul_broadcast")
    _check_featmap(w, "mul_broadcast")
    n, _, h, wd = x.shape
    if w.shape != (n, 1, h, wd):
        raise ValueError(f"mul_broadcast: weight map must be {(n, 1, h, wd)}, got {w.shape}")
    out = make_output("mul_broadcast", x.data * w.data, (x, w),
                      lambda g: (g * w.data, (g * x.data).sum(axis=1, keepdims=True)))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_output("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                       lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ValueError(f"reshape: cannot view {src} as {tuple(shape)}") from e
    return make_output("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_output("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_output("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make_output("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                       lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors."""
    if not terms:
        raise ValueError("add_n: empty sequence")
    out = terms[0].data.copy()
    for t in terms[1:]:
        if t.shape != out.shape:
            raise ValueError(f"add_n: shape mismatch {t.shape} vs {out.shape}")
        out = out + t.data
    return make_output("add_n", out, tuple(terms), lambda g: tuple(g for _ in terms))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` [N,Ca,h,w] then ``b`` [N,Cb,h,w] along channels."""
    _check_featmap(a, "concat_channels")
    _check_featmap(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_output("concat_channels", out, (a, b),
                       lambda g: (g[:, :ca].copy(), g[:, ca:].copy()))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling; the backward pass sums each 2x2 block."""
    _check_featmap(x, "upsample2x")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_output("upsample2x", out, (x,), backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first element in row-major order."""
    _check_featmap(x, "maxpool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2: spatial extent must be even, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_output("maxpool2x2", out, (x,), backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample channel normalisation over the spatial extent, then affine ``gamma``, ``beta`` [C]."""
    _check_featmap(x, "batchnorm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: gamma/beta must have shape ({c},)")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gv = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gv + beta.data.reshape(1, c, 1, 1)
    m = xd.shape[2] * xd.shape[3]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=(2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True) / m)
        return dx, dgamma, dbeta

    return make_output("batchnorm", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``; leading axes broadcast like ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_output("matmul", out, (a, b), backward)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(f"conv2d: output size ({size}+2*{pad}-{k})/{stride}+1 is not integral")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of ``x`` [N,Cin,h,w] with ``kernel`` [Cout,Cin,kh,kw]."""
    _check_featmap(x, "conv2d")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be [Cout, Cin, kh, kw], got {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d: kernel expects {kcin} input channels, feature map has {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extent must be odd, got {kh}x{kw}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    kmat = kernel.data.reshape(cout, -1)

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gflat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        if not x.requires_grad:
            return None, gk
        dcols = gflat @ kmat
        if kh == 1 and kw == 1 and stride == 1 and pad == 0:
            return dcols.reshape(n, h, w, cin).transpose(0, 3, 1, 2), gk
        dcols = dcols.reshape(n, ho, wo, cin, kh, kw)
        dxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return np.ascontiguousarray(gx), gk

    return make_output("conv2d", out, (x, kernel), backward)


def l2_normalize_channel(x: Tensor, eps: float = L2_EPS) -> Tensor:
    """Divide each location's channel vector by ``max(norm, eps)``."""
    _check_featmap(x, "l2_normalize_channel")
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    guarded = norm <= eps
    denom = np.where(guarded, xd.dtype.type(eps), norm)
    y = xd / denom

    def backward(g):
        # d(x/|x|) = (g - y <g, y>) / |x| ; inside the eps guard the map is linear.
        proj = (g * y).sum(axis=1, keepdims=True)
        gx = np.where(guarded, g / denom, (g - y * proj) / denom)
        return (gx,)

    return make_output("l2_normalize_channel", y, (x,), backward)


def rowwise_max_argmax(r: Tensor) -> tuple[Tensor, np.ndarray]:
    """Per-row maximum ``W`` and argmax ``H`` over the last axis (lowest index wins ties).

    Only ``W`` is differentiable; its gradient flows to the selected entries.
    """
    if r.ndim < 2 or r.shape[-1] == 0 or r.shape[-2] == 0:
        raise ValueError(f"rowwise_max_argmax: need a non-empty [..., n, m] matrix, got {r.shape}")
    idx = r.data.argmax(axis=-1)
    w = np.take_along_axis(r.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gr = np.zeros_like(r.data)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        return (gr,)

    return make_output("rowwise_max", w, (r,), backward), idx


def gather_rows(v: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``index`` of ``v`` [..., m, C]; ``index`` has shape [..., n] with matching leading axes."""
    index = np.asarray(index)
    if v.ndim < 2:
        raise ValueError(f"gather_rows: expected [..., m, C], got {v.shape}")
    if index.dtype.kind not in "iu":
        raise TypeError("gather_rows: index must be integral")
    if index.shape[:-1] != v.shape[:-2]:
        raise ValueError(f"gather_rows: index leading shape {index.shape[:-1]} != {v.shape[:-2]}")
    m = v.shape[-2]
    if index.size and (index.min() < 0 or index.max() >= m):
        raise IndexError(f"gather_rows: index out of range [0, {m})")
    out = np.take_along_axis(v.data, index[..., None], axis=-2)

    def backward(g):
        gv = np.zeros_like(v.data)
        lead = v.shape[:-2]
        flat_v = gv.reshape(-1, m, v.shape[-1])
        flat_i = index.reshape(-1, index.shape[-1])
        flat_g = g.reshape(-1, index.shape[-1], v.shape[-1])
        for b in range(flat_v.shape[0]):
            np.add.at(flat_v[b], flat_i[b], flat_g[b])
        return (flat_v.reshape(*lead, m, v.shape[-1]),)

    return make_output("gather_rows", out, (v,), backward)


# ---------------------------------------------------------------------------
# losses

def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; the subgradient at exact ties is zero."""
    if a.shape != b.shape:
        raise ValueError(f"l1_loss: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    sgn = np.sign(diff)

    def backward(g):
        ga = sgn * (g / n)
        return ga, -ga

    return make_output("l1_loss", np.asarray(np.abs(diff).mean(), dtype=a.dtype), (a, b), backward)


def log_softmax_np(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def weighted_cross_entropy(logits: Tensor, target: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Pixel-mean of ``w[t] * -log softmax(logits)[t]`` for logits [N,K,h,w] and target [N,h,w]."""
    _check_featmap(logits, "weighted_cross_entropy")
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ValueError(f"weighted_cross_entropy: target shape {target.shape} != {(n, h, w)}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"weighted_cross_entropy: class ids must lie in [0, {k})")
    if weights is None:
        weights = np.ones(k)
    weights = np.asarray(weights, dtype=logits.dtype)
    if weights.shape != (k,) or np.any(weights <= 0):
        raise ValueError("weighted_cross_entropy: weights must be K positive numbers")
    logp = log_softmax_np(logits.data, axis=1)
    t = target.astype(np.int64)[:, None]
    picked = np.take_along_axis(logp, t, axis=1)[:, 0]
    wpix = weights[target]
    count = n * h * w
    loss = np.asarray(-(wpix * picked).sum() / count, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1, axis=1)
        return (grad * (wpix[:, None] * (g / count)),)

    return make_output("weighted_cross_entropy", loss, (logits,), backward)
