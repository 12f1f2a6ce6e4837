import math

import numpy as np
import pytest

from ftvp.projection import (
    KV_MODES,
    CvpParams,
    CvtParams,
    FtvpOptions,
    Mlp,
    canonical_kv_mode,
    cross_view_relevance,
    cvp_forward,
    cvt_forward,
    cvt_variant,
    cycle_loss,
    ftvp_block,
    init_cvp,
    init_cvt,
)
from ftvp.tensor import Tensor, add, finite_diff_check, reshape, rowwise_max_argmax, scale

from oracles import cvp_oracle, cvt_oracle


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def f64(params):
    """Cast every tensor of a CVP/CVT parameter set to float64."""
    if isinstance(params, Mlp):
        return Mlp(*(T(t.data) for t in (params.w1, params.b1, params.w2, params.b2)))
    if isinstance(params, CvpParams):
        return CvpParams(f64(params.fwd), f64(params.bwd) if params.bwd is not None else None, params.mode)
    return CvtParams(*(T(t.data) for t in (params.proj_k, params.proj_q, params.proj_v, params.fuse)))


def random_maps(rng, c, h, w, n=3):
    return [T(rng.standard_normal((1, c, h, w))) for _ in range(n)]


# --- CVP ---------------------------------------------------------------------------

@pytest.mark.parametrize("mode,shape", [("spatial", (64, 8, 8)), ("full", (8, 4, 4))])
def test_cvp_preserves_shape(mode, shape):
    rng = np.random.default_rng(0)
    p = init_cvp(rng, *shape, mode=mode)
    xp, xpp = cvp_forward(Tensor(rng.standard_normal((1, *shape)).astype(np.float32)), p)
    assert xp.shape == xpp.shape == (1, *shape)


def test_cvp_hidden_width_defaults_to_half():
    p = init_cvp(np.random.default_rng(0), 4, 2, 2, mode="full")
    assert p.hidden_width == 8
    assert p.fwd is not p.bwd


def test_cvp_exact_inverse_gives_zero_cycle_loss():
    rng = np.random.default_rng(1)
    width = 2 * 2 * 2
    a = rng.standard_normal((width, width)) + 3 * np.eye(width)
    big = 1e3 * np.ones(width)
    fwd = Mlp(T(a), T(big), T(np.eye(width)), T(-big))
    bwd = Mlp(T(np.linalg.inv(a)), T(big), T(np.eye(width)), T(-big))
    x = T(rng.uniform(-1, 1, (1, 2, 2, 2)))
    xp, xpp = cvp_forward(x, CvpParams(fwd, bwd, "full"))
    assert cycle_loss(x, xpp).item() < 1e-12


@pytest.mark.parametrize("mode", ["spatial", "full"])
def test_cvp_matches_loop_oracle(mode):
    rng = np.random.default_rng(2)
    p = f64(init_cvp(rng, 3, 2, 4, mode=mode))
    x = rng.standard_normal((3, 2, 4))
    xp, xpp = cvp_forward(T(x[None]), p)
    unpack = lambda m: tuple(t.data for t in (m.w1, m.b1, m.w2, m.b2))
    oxp, oxpp = cvp_oracle(x, unpack(p.fwd), unpack(p.bwd), mode)
    np.testing.assert_allclose(xp.data[0], oxp, atol=1e-12, rtol=0)
    np.testing.assert_allclose(xpp.data[0], oxpp, atol=1e-12, rtol=0)


def test_cvp_gradients_reach_both_mlps():
    rng = np.random.default_rng(3)
    p = f64(init_cvp(rng, 2, 2, 2, mode="full"))
    flat = [p.fwd.w1, p.fwd.b1, p.fwd.w2, p.fwd.b2, p.bwd.w1, p.bwd.b1, p.bwd.w2, p.bwd.b2]

    def fn(x, *ws):
        q = CvpParams(Mlp(*ws[:4]), Mlp(*ws[4:]), "full")
        _, xpp = cvp_forward(x, q)
        return xpp

    inputs = [rng.standard_normal((1, 2, 2, 2))] + [t.data for t in flat]
    res = finite_diff_check(fn, inputs)
    assert res.max_rel_error < 1e-5
    assert res.checked > 0.8 * sum(a.size for a in inputs)


def test_cvp_width_mismatch():
    p = init_cvp(np.random.default_rng(0), 2, 2, 2, mode="full")
    with pytest.raises(ValueError, match="width"):
        cvp_forward(T(np.zeros((1, 2, 4, 4))), p)


def test_cycle_loss_examples():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 2, 3, 3))
    assert cycle_loss(T(x), T(x)).item() == 0.0
    assert math.isclose(cycle_loss(T(x), T(x + 0.5)).item(), 0.5, rel_tol=1e-12)
    y = rng.standard_normal((1, 2, 3, 3))
    assert math.isclose(cycle_loss(T(x), T(y)).item(), np.abs(x - y).sum() / x.size, rel_tol=1e-12)


# --- relevance ---------------------------------------------------------------------

def _vec_map(*vecs):
    return T(np.array(vecs, dtype=float).T.reshape(1, len(vecs[0]), 1, len(vecs)))


def test_relevance_examples():
    r = cross_view_relevance(_vec_map([2.0, 4.0]), _vec_map([1.0, 2.0])).data
    assert math.isclose(r[0, 0, 0], 1.0, rel_tol=1e-15)
    r = cross_view_relevance(_vec_map([1.0, 0.0]), _vec_map([0.0, 3.0])).data
    assert r[0, 0, 0] == 0.0
    r = cross_view_relevance(_vec_map([1.0, 0.0]), _vec_map([1.0, 1.0])).data
    assert math.isclose(r[0, 0, 0], 1 / math.sqrt(2), rel_tol=1e-15)


def test_relevance_rows_are_queries():
    q = _vec_map([1.0, 0.0], [0.0, 1.0])
    k = _vec_map([0.0, 1.0], [1.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        cross_view_relevance(q, k)
    k = _vec_map([0.0, 1.0], [1.0, 0.0])
    np.testing.assert_allclose(cross_view_relevance(q, k).data[0], [[0, 1], [1, 0]])


# --- CVT ----------------------------------------------------------------------------

def test_cvt_zero_attention_is_residual_identity():
    c, h, w = 4, 3, 3
    rng = np.random.default_rng(5)
    x = np.zeros((1, c, h, w))
    x[0, 1] = rng.uniform(0.5, 1.0, (h, w))
    xp = np.zeros((1, c, h, w))
    xp[0, 0] = rng.uniform(0.5, 1.0, (h, w))
    eye = np.eye(c).reshape(c, c, 1, 1)
    p = CvtParams(T(eye), T(eye), T(eye), T(rng.standard_normal((c, 2 * c, 3, 3))))
    out, inter = cvt_forward(T(x), T(xp), T(rng.standard_normal((1, c, h, w))), p)
    assert not inter.W.any()
    np.testing.assert_array_equal(out.data, xp)


def test_cvt_single_location():
    rng = np.random.default_rng(6)
    c = 3
    x, xp, xpp = random_maps(rng, c, 1, 1)
    p = f64(init_cvt(rng, c))
    out, inter = cvt_forward(x, xp, xpp, p)
    assert inter.R.shape == (1, 1, 1)
    assert inter.H.tolist() == [[0]]
    tv = np.einsum("oc,c->o", p.proj_v.data[:, :, 0, 0], xpp.data[0, :, 0, 0])
    np.testing.assert_allclose(inter.T[0, :, 0, 0], tv, atol=1e-14)
    centre = p.fuse.data[:, :, 1, 1]
    expected = xp.data[0, :, 0, 0] + centre @ np.concatenate([x.data[0, :, 0, 0], tv]) * inter.R[0, 0, 0]
    np.testing.assert_allclose(out.data[0, :, 0, 0], expected, atol=1e-13)


@pytest.mark.parametrize("mode", list(KV_MODES))
@pytest.mark.parametrize("selection", [True, False])
def test_cvt_matches_loop_oracle(mode, selection):
    rng = np.random.default_rng(7)
    x, xp, xpp = random_maps(rng, 8, 4, 4)
    p = f64(init_cvt(rng, 8))
    out, inter = cvt_forward(x, xp, xpp, p, kv_mode=mode, selection=selection)
    key, value = KV_MODES[mode]
    o_out, R, W, H, Tm = cvt_oracle(x.data[0], xp.data[0], xpp.data[0], p.proj_k.data, p.proj_q.data,
                                    p.proj_v.data, p.fuse.data, key, value, selection)
    np.testing.assert_allclose(inter.R[0], R, atol=1e-12, rtol=0)
    np.testing.assert_array_equal(inter.H[0], H)
    np.testing.assert_allclose(inter.W[0], W, atol=1e-12, rtol=0)
    np.testing.assert_allclose(inter.T[0], Tm, atol=1e-12, rtol=0)
    np.testing.assert_allclose(out.data[0], o_out, atol=1e-9, rtol=0)


def test_cvt_intermediate_invariants():
    rng = np.random.default_rng(8)
    x, xp, xpp = random_maps(rng, 5, 3, 3)
    p = f64(init_cvt(rng, 5))
    _, inter = cvt_forward(x, xp, xpp, p)
    assert np.all(np.abs(inter.R) <= 1 + 1e-12)
    np.testing.assert_array_equal(inter.W[0], inter.R[0][np.arange(9), inter.H[0]])
    v = np.einsum("oc,chw->ohw", p.proj_v.data[:, :, 0, 0], xpp.data[0]).reshape(5, 9)
    np.testing.assert_allclose(inter.T[0].reshape(5, 9), v[:, inter.H[0]], atol=1e-14, rtol=0)


def test_relevance_nonnegative_inputs_give_unit_interval():
    rng = np.random.default_rng(9)
    q = T(rng.uniform(0, 1, (1, 6, 3, 3)))
    k = T(rng.uniform(0, 1, (1, 6, 3, 3)))
    r = cross_view_relevance(q, k).data
    assert r.min() >= 0 and r.max() <= 1 + 1e-12


def test_key_rescaling_and_permutation():
    rng = np.random.default_rng(10)
    q = T(rng.standard_normal((1, 4, 3, 3)))
    k = rng.standard_normal((1, 4, 3, 3))
    w0, h0 = rowwise_max_argmax(cross_view_relevance(q, T(k)))
    alpha = rng.uniform(0.1, 10, (1, 1, 3, 3))
    w1, h1 = rowwise_max_argmax(cross_view_relevance(q, T(k * alpha)))
    np.testing.assert_allclose(w1.data, w0.data, atol=1e-12)
    np.testing.assert_array_equal(h1, h0)
    perm = rng.permutation(9)
    kp = k.reshape(1, 4, 9)[:, :, perm].reshape(1, 4, 3, 3)
    w2, h2 = rowwise_max_argmax(cross_view_relevance(q, T(kp)))
    inv = np.argsort(perm)
    np.testing.assert_array_equal(h2[0], inv[h0[0]])
    np.testing.assert_allclose(np.sort(w2.data), np.sort(w0.data), atol=1e-12)


# --- composed block ------------------------------------------------------------------

def _block_params(rng, c, h, w, mode="spatial"):
    return f64(init_cvp(rng, c, h, w, mode=mode)), f64(init_cvt(rng, c))


def test_block_shape_and_zero_fuse():
    rng = np.random.default_rng(11)
    cvp, cvt = _block_params(rng, 6, 4, 4)
    x = T(rng.standard_normal((1, 6, 4, 4)))
    out, cyc = ftvp_block(x, cvp, cvt)
    assert out.shape == x.shape and cyc.item() >= 0
    cvt.fuse = T(np.zeros_like(cvt.fuse.data))
    out, _ = ftvp_block(x, cvp, cvt)
    xp, _ = cvp_forward(x, cvp)
    np.testing.assert_array_equal(out.data, xp.data)


@pytest.mark.parametrize("seed", range(3))
def test_block_end_to_end_gradcheck(seed):
    rng = np.random.default_rng(seed)
    cvp, cvt = _block_params(rng, 2, 4, 4, mode="full")
    params = [cvp.fwd.w1, cvp.fwd.b1, cvp.fwd.w2, cvp.fwd.b2, cvp.bwd.w1, cvp.bwd.b1, cvp.bwd.w2,
              cvp.bwd.b2, cvt.proj_k, cvt.proj_q, cvt.proj_v, cvt.fuse]

    def fn(x, *ws):
        p1 = CvpParams(Mlp(*ws[:4]), Mlp(*ws[4:8]), "full")
        p2 = CvtParams(*ws[8:])
        out, cyc = ftvp_block(x, p1, p2)
        return add(reshape(out, (-1,)), reshape(scale(cyc, 3.0), (1,)))

    res = finite_diff_check(fn, [rng.standard_normal((1, 2, 4, 4))] + [p.data for p in params])
    assert res.max_rel_error < 1e-4


# --- key/value variants -----------------------------------------------------------------

def test_variant_default_reproduces_block():
    rng = np.random.default_rng(12)
    cvp, cvt = _block_params(rng, 4, 4, 4)
    x = T(rng.standard_normal((1, 4, 4, 4)))
    a, ca = ftvp_block(x, cvp, cvt)
    b, cb = cvt_variant("K=X&V=X″")(x, cvp, cvt)
    np.testing.assert_array_equal(a.data, b.data)
    assert ca.item() == cb.item()


def test_q_only_never_reads_front_view_maps():
    rng = np.random.default_rng(13)
    c = 4
    xp = T(rng.standard_normal((1, c, 4, 4)))
    poison = T(np.full((1, c, 4, 4), np.nan))
    out, _ = cvt_forward(poison, xp, poison, f64(init_cvt(rng, c)), kv_mode="Q-only")
    assert np.isfinite(out.data).all()


@pytest.mark.parametrize("mode", list(KV_MODES))
def test_all_variants_run(mode):
    rng = np.random.default_rng(14)
    cvp, cvt = _block_params(rng, 4, 4, 4)
    out, _ = cvt_variant(mode)(T(rng.standard_normal((1, 4, 4, 4))), cvp, cvt)
    assert out.shape == (1, 4, 4, 4)


def test_unknown_variant():
    with pytest.raises(ValueError):
        canonical_kv_mode("K=V")
    with pytest.raises(ValueError):
        FtvpOptions(cycle=False, kv_mode="K=X&V=X''")
