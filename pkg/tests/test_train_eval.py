import csv
import math

import numpy as np
import pytest
from sklearn.metrics import average_precision_score

from ftvp.config import NetConfig, resolve
from ftvp.data_synth import Dataset, GridConfig, generate_samples, make_drive, rasterize_bev
from ftvp.network import class_weights, forward, init_params, load_checkpoint, model_loss
from ftvp.tensor import NumericError, Tape
from ftvp.train_eval import (
    ACCRETION_LABELS,
    AdamState,
    ablation_variants,
    adam_step,
    average_precision,
    confusion_counts,
    evaluate,
    iou_from_counts,
    metrics_from_predictions,
    poly_lr,
    stitch_panorama,
    train,
)

from oracles import average_precision_bruteforce, iou_sets


# --- schedule and optimiser -----------------------------------------------------------

def test_poly_lr_examples():
    assert poly_lr(0, 100, 1e-4) == 1e-4
    assert poly_lr(100, 100, 1e-4) == 0.0
    assert math.isclose(poly_lr(50, 100, 1.0, 0.9), 0.5 ** 0.9)
    assert math.isclose(0.5 ** 0.9, 0.5359, abs_tol=5e-5)
    lrs = [poly_lr(i, 37, 0.1, 0.9) for i in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        poly_lr(101, 100, 1e-4)


def test_adam_first_step_is_lr_times_sign():
    for g in (3.7, -0.002):
        p = {"w": np.array([1.0])}
        adam_step(p, {"w": np.array([g])}, AdamState(), lr=0.01)
        assert math.isclose(p["w"][0], 1.0 - 0.01 * math.copysign(1, g), rel_tol=1e-6)


def test_adam_zero_gradient_leaves_parameter():
    p = {"w": np.array([1.5, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])


def test_adam_quadratic_bowl():
    # f(w) = sum a_i (w_i - c_i)^2 with minimum at c
    a = np.array([1.0, 4.0, 0.25])
    c = np.array([3.0, -1.0, 0.5])
    p = {"w": np.zeros(3)}
    state = AdamState()
    for it in range(300):
        adam_step(p, {"w": 2 * a * (p["w"] - c)}, state, lr=poly_lr(it, 300, 0.5, 0.9))
    assert np.abs(p["w"] - c).max() < 1e-5


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState(), lr=0.1)


# --- metrics --------------------------------------------------------------------------

def test_metric_analytic_cases():
    gt = np.zeros((1, 4, 4), dtype=np.int64)
    gt[0, :, :2] = 1
    onehot = np.stack([(gt == k).astype(float) for k in range(2)], axis=1)
    rep = metrics_from_predictions(onehot, gt, ["bg", "fg"])
    assert rep.miou == 100.0 and rep.map == 100.0

    disjoint = 1 - gt
    assert iou_from_counts(confusion_counts(disjoint, gt, 2))[1] == 0.0

    # equal-area regions overlapping in half of each: |A∩B| = 4, |A∪B| = 12
    pred = np.zeros_like(gt)
    pred[0, :, 1:3] = 1
    assert iou_from_counts(confusion_counts(pred, gt, 2))[1] == 1 / 3


def test_metrics_match_set_oracles_on_random_masks():
    rng = np.random.default_rng(0)
    for trial in range(50):
        k = int(rng.integers(2, 5))
        shape = (int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        gt = rng.integers(0, k, shape)
        logits = rng.standard_normal((shape[0], k, *shape[1:]))
        if trial % 3 == 0:
            logits = np.round(logits, 1)  # force score ties
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        rep = metrics_from_predictions(probs, gt, [str(i) for i in range(k)])
        pred = probs.argmax(axis=1)
        for c in range(k):
            want = iou_sets(pred, gt, c)
            got = rep.iou[c]
            assert (math.isnan(want) and math.isnan(got)) or got == want
            want_ap = average_precision_bruteforce(probs[:, c].ravel(), (gt == c).ravel())
            got_ap = rep.ap[c]
            assert (math.isnan(want_ap) and math.isnan(got_ap)) or got_ap == want_ap
            if (gt == c).any():
                assert abs(got_ap - average_precision_score((gt == c).ravel(), probs[:, c].ravel())) < 1e-12


def test_ap_is_one_when_classes_separate():
    rng = np.random.default_rng(1)
    pos = rng.random(200) < 0.3
    scores = np.where(pos, rng.uniform(0.6, 1.0, 200), rng.uniform(0.0, 0.6, 200))
    assert average_precision(scores, pos) == 1.0
    assert math.isnan(average_precision(scores, np.zeros(200, bool)))


def test_metrics_are_permutation_invariant():
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 3, (5, 6, 6))
    probs = rng.dirichlet(np.ones(3), (5, 6, 6)).transpose(0, 3, 1, 2)
    perm = rng.permutation(5)
    a = metrics_from_predictions(probs, gt, list("abc"))
    b = metrics_from_predictions(probs[perm], gt[perm], list("abc"))
    np.testing.assert_array_equal(a.confusion, b.confusion)
    np.testing.assert_array_equal(a.ap, b.ap)


def test_background_excluded_from_means():
    gt = np.array([[[0, 0], [1, 2]]])
    pred = np.array([[[1, 0], [1, 2]]])
    probs = np.eye(3)[pred].transpose(0, 3, 1, 2).astype(float)
    rep = metrics_from_predictions(probs, gt, list("abc"))
    assert rep.miou == pytest.approx(100 * (0.5 + 1.0) / 2)
    assert rep.to_dict()["classes"][0]["tp"] == 1


# --- training ------------------------------------------------------------------------

TINY_NET, TINY_TRAIN = resolve("tiny")


@pytest.fixture(scope="module")
def tiny_data():
    return Dataset.from_samples(generate_samples(11, 8, image_size=64), 3)


def test_train_writes_curve_and_checkpoints(tmp_path, tiny_data):
    res = train(tiny_data, TINY_NET, TINY_TRAIN, tmp_path, val=tiny_data.subset([0, 1]))
    with open(tmp_path / "loss.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "iter", "lr", "total", "seg_0", "seg_1", "cycle_total"]
    assert len(rows) == 1 + TINY_TRAIN.epochs
    assert int(rows[-1][1]) == TINY_TRAIN.epochs * math.ceil(8 / TINY_TRAIN.batch_size)
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    params, extra = load_checkpoint(res.checkpoint)
    assert extra["miou"] == res.best_miou and params.cfg == TINY_NET


def test_training_is_bitwise_deterministic(tmp_path, tiny_data):
    for run in ("a", "b"):
        train(tiny_data, TINY_NET, TINY_TRAIN, tmp_path / run)
    for name in ("loss.csv", "last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_parameter_aborts_with_name(tiny_data):
    params = init_params(TINY_NET, 0)
    params["enc.stem.conv"].data[0, 0, 0, 0] = np.inf
    with pytest.raises(NumericError, match="enc.stem.conv"):
        train(tiny_data, TINY_NET, TINY_TRAIN, params=params)


def test_train_rejects_mismatched_data(tiny_data):
    with pytest.raises(ValueError, match="classes"):
        train(tiny_data, NetConfig(**{**TINY_NET.to_dict(), "num_classes": 4}), TINY_TRAIN)
    with pytest.raises(ValueError, match="empty"):
        evaluate(init_params(TINY_NET, 0), tiny_data.subset([]))


# The tiny preset is too narrow for this: with a handful of channels the relevance argmax
# flips between steps and the loss can tick up. The desk architecture is used instead.
DESK_NET_128, DESK_TRAIN = resolve("desk", overrides={"net": {"input_size": 128}})


@pytest.fixture(scope="module")
def desk_samples():
    return Dataset.from_samples(generate_samples(11, 3, image_size=128), 3)


@pytest.mark.parametrize("seed", range(3))
def test_loss_non_increasing_over_first_50_steps(seed, desk_samples):
    one = desk_samples.subset([seed])
    params = init_params(DESK_NET_128, seed)
    weights = class_weights(one.class_frequencies)
    state = AdamState()
    losses = []
    for it in range(51):
        params.zero_grad()
        with Tape() as tape:
            lt = model_loss(forward(one.images, params), one.masks, params, weights)
        tape.backward(lt.total)
        losses.append(lt.total.item())
        grads = {k: t.grad for k, t in params.tensors.items() if t.grad is not None}
        adam_step({k: t.data for k, t in params.tensors.items()}, grads, state, poly_lr(it, 50, DESK_TRAIN.lr0))
    assert all(b <= a for a, b in zip(losses, losses[1:])), np.diff(losses).max()
    assert losses[-1] < 0.5 * losses[0]


def test_ablation_variant_wiring():
    base = NetConfig()
    rows = ablation_variants("accretion", base)
    assert tuple(label for label, _ in rows) == ACCRETION_LABELS
    baseline = init_params(rows[0][1], 0)
    assert not [n for n in baseline.tensors if ".cvp." in n or ".cvt." in n]
    mlp = init_params(rows[1][1], 0)
    assert any(".cvp.fwd" in n for n in mlp.tensors) and not any(".cvt." in n for n in mlp.tensors)
    assert rows[-1][1].deep_supervision and rows[-1][1].ftvp_scales == base.ftvp_scales
    assert rows[-2][1].ftvp_scales == base.ftvp_scales and not rows[-2][1].deep_supervision
    kv = ablation_variants("kv_combos", base)
    assert [c.ftvp.kv_mode for _, c in kv] == ["Q-only", "K=X''&V=X''", "K=X&V=X", "K=X''&V=X", "K=X&V=X''"]
    with pytest.raises(ValueError):
        ablation_variants("nope", base)


# --- panorama -------------------------------------------------------------------------

def _loop_compositor(masks, poses, pano):
    out = np.zeros_like(pano.mask)
    seen = np.zeros(pano.mask.shape, bool)
    grid = GridConfig.for_image(masks[0].shape[0] * 4)
    res = grid.res
    for m, (px, py, _) in zip(masks, poses):
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                x = px + grid.x_max - (i + 0.5) * res
                y = py + grid.y_max - (j + 0.5) * res
                gi = int(round((pano.x_top - x) / res - 0.5))
                gj = int(round((pano.y_left - y) / res - 0.5))
                out[gi, gj] = m[i, j]
                seen[gi, gj] = True
    return out, seen


def test_single_frame_identity():
    grid = GridConfig(cells=16)
    m = np.random.default_rng(0).integers(0, 3, grid.shape).astype(np.uint8)
    pano = stitch_panorama([m], [(0.0, 0.0, 0.0)], grid)
    np.testing.assert_array_equal(pano.mask, m)
    assert pano.observed.all()
    pano2 = stitch_panorama([m, m], [(0.0, 0.0, 0.0)] * 2, grid)
    np.testing.assert_array_equal(pano2.mask, m)


def test_one_cell_shift_matches_loop_compositor():
    grid = GridConfig(cells=16)
    rng = np.random.default_rng(1)
    masks = [rng.integers(0, 3, grid.shape).astype(np.uint8) for _ in range(2)]
    poses = [(0.0, 0.0, 0.0), (grid.res, 0.0, 0.0)]
    pano = stitch_panorama(masks, poses, grid)
    want, seen = _loop_compositor(masks, poses, pano)
    np.testing.assert_array_equal(pano.mask, want)
    np.testing.assert_array_equal(pano.observed, seen)
    # the later frame wins on the overlap
    np.testing.assert_array_equal(pano.mask[:16], masks[1])


def test_panorama_translation_equivariance():
    grid = GridConfig(cells=16)
    rng = np.random.default_rng(2)
    masks = [rng.integers(0, 3, grid.shape).astype(np.uint8) for _ in range(4)]
    poses = [(k * 3 * grid.res, (k % 2) * 2 * grid.res, 0.0) for k in range(4)]
    a = stitch_panorama(masks, poses, grid)
    shifted = [(x + 5 * grid.res, y - 7 * grid.res, 0.0) for x, y, _ in poses]
    b = stitch_panorama(masks, shifted, grid)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert b.x_top == a.x_top + 5 * grid.res and b.y_left == a.y_left - 7 * grid.res


def test_panorama_of_short_drive_is_cell_exact():
    drive = make_drive(3, frames=4, step_cells=3, image_size=64)
    pano = stitch_panorama([s.mask for s in drive.samples], [s.pose for s in drive.samples], drive.grid)
    truth = rasterize_bev(drive.world, pano.grid())
    np.testing.assert_array_equal(pano.mask[pano.observed], truth[pano.observed])


def test_panorama_errors():
    with pytest.raises(ValueError, match="empty"):
        stitch_panorama([], [], GridConfig())
    with pytest.raises(ValueError):
        stitch_panorama([np.zeros((3, 3), np.uint8)], [(0, 0, 0)], GridConfig())
