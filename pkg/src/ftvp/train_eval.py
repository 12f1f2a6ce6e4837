"""Optimisation (Adam + poly schedule), metrics, the ablation runner, and panorama stitching."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .config import NetConfig, TrainConfig
from .data_synth import Dataset, GridConfig
from .network import ModelParams, class_weights, forward, init_params, model_loss, predict, save_checkpoint
from .projection import FtvpOptions
from .tensor import NumericError, Tape


# ---------------------------------------------------------------------------
# optimiser

def poly_lr(it: int, total: int, lr0: float, power: float = 0.9) -> float:
    if total <= 0:
        raise ValueError(f"poly_lr: total iterations must be positive, got {total}")
    if not 0 <= it <= total:
        raise ValueError(f"poly_lr: iteration {it} outside [0, {total}]")
    return lr0 * (1.0 - it / total) ** power


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, in place. Parameters without a gradient are left alone."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# metrics

def confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """[K,4] pooled counts (TP, FP, FN, TN) per class."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    cm = np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    return np.stack([tp, fp, fn, tn], axis=1)


def iou_from_counts(counts: np.ndarray) -> np.ndarray:
    tp, fp, fn = counts[:, 0], counts[:, 1], counts[:, 2]
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def average_precision(scores, positives) -> float:
    """Area under the step precision-recall curve, one operating point per distinct score.

    Tied scores enter together. NaN when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(positives, dtype=bool).ravel()
    total = int(pos.sum())
    if total == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(pos[order])
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp_g = tp[last]
    recall = tp_g / total
    precision = tp_g / (last + 1)
    prev = np.r_[0.0, recall[:-1]]
    # cumsum accumulates left to right, the same order as a running sum
    return float(np.cumsum((recall - prev) * precision)[-1])


@dataclass
class EvalReport:
    class_names: list
    confusion: np.ndarray       # [K,4] TP, FP, FN, TN
    iou: np.ndarray
    ap: np.ndarray
    miou: float                 # percent, mean over non-background classes present
    map: float                  # percent
    num_samples: int

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and math.isnan(x) else x
        per_class = []
        for k, name in enumerate(self.class_names):
            tp, fp, fn, tn = (int(c) for c in self.confusion[k])
            per_class.append({"id": k, "name": name, "tp": tp, "fp": fp, "fn": fn, "tn": tn,
                              "iou": clean(float(self.iou[k])), "ap": clean(float(self.ap[k]))})
        return {"mIOU": clean(self.miou), "mAP": clean(self.map), "num_samples": self.num_samples,
                "background_excluded": True, "classes": per_class}

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def _mean_percent(values: np.ndarray) -> float:
    rest = values[1:]
    rest = rest[~np.isnan(rest)]
    return float(rest.mean() * 100) if rest.size else float("nan")


def metrics_from_predictions(probs: np.ndarray, gt: np.ndarray, class_names: Sequence[str],
                             pred: Optional[np.ndarray] = None) -> EvalReport:
    """Pooled metrics from softmax maps [N,K,h,w] and targets [N,h,w]."""
    probs = np.asarray(probs)
    gt = np.asarray(gt).astype(np.int64)
    k = probs.shape[1]
    if gt.size == 0:
        raise ValueError("evaluate: empty dataset")
    if pred is None:
        pred = probs.argmax(axis=1)
    counts = confusion_counts(pred, gt, k)
    iou = iou_from_counts(counts)
    ap = np.array([average_precision(probs[:, c], gt == c) for c in range(k)])
    return EvalReport(list(class_names), counts, iou, ap, _mean_percent(iou), _mean_percent(ap), len(gt))


def evaluate(params: ModelParams, dataset: Dataset, batch_size: int = 8,
             class_names: Optional[Sequence[str]] = None) -> EvalReport:
    cfg = params.cfg
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    if dataset.num_classes != cfg.num_classes:
        raise ValueError(f"evaluate: model predicts {cfg.num_classes} classes, dataset has {dataset.num_classes}")
    if dataset.image_size != cfg.input_size:
        raise ValueError(f"evaluate: model expects {cfg.input_size}px images, dataset has {dataset.image_size}px")
    probs, masks = predict(dataset.images, params, batch_size)
    names = class_names or [f"class_{i}" for i in range(cfg.num_classes)]
    return metrics_from_predictions(probs, dataset.masks, names, masks)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    params: ModelParams
    history: list                   # per-epoch rows as written to the CSV
    iteration_losses: list
    best_miou: Optional[float]
    checkpoint: Optional[Path]
    csv_path: Optional[Path]


def csv_header(cfg: NetConfig) -> list[str]:
    n = len(cfg.supervised_scales()) if cfg.deep_supervision else 1
    return ["epoch", "iter", "lr", "total"] + [f"seg_{i}" for i in range(n)] + ["cycle_total"]


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def train(dataset: Dataset, net_cfg: NetConfig, train_cfg: TrainConfig, out_dir: Optional[str | Path] = None,
          val: Optional[Dataset] = None, params: Optional[ModelParams] = None,
          log: Optional[Callable[[str], None]] = None, dtype=np.float32) -> TrainResult:
    """Train from a fixed seed; the run is a pure function of its arguments.

    Writes ``loss.csv``, ``last.ckpt`` and, with a validation set, ``best.ckpt``
    (highest mIOU) under ``out_dir``.
    """
    if len(dataset) == 0:
        raise ValueError("train: dataset is empty")
    if dataset.num_classes != net_cfg.num_classes:
        raise ValueError(f"train: dataset has {dataset.num_classes} classes, net.num_classes={net_cfg.num_classes}")
    if dataset.image_size != net_cfg.input_size:
        raise ValueError(f"train: dataset images are {dataset.image_size}px, net.input_size={net_cfg.input_size}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = params or init_params(net_cfg, train_cfg.seed, dtype=dtype)
    weights = class_weights(dataset.class_frequencies)
    n = len(dataset)
    per_epoch = math.ceil(n / train_cfg.batch_size)
    total_iters = train_cfg.epochs * per_epoch
    state = AdamState()
    header = csv_header(net_cfg)
    history, iter_losses = [], []
    best, best_path = None, None
    it = 0
    extra_base = {"train": train_cfg.to_dict(), "class_weights": [float(w) for w in weights]}

    csv_file = open(out / "loss.csv", "w", newline="") if out else None
    writer = csv.writer(csv_file) if csv_file else None
    if writer:
        writer.writerow(header)
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
            sums = np.zeros(len(header) - 3)
            lr = train_cfg.lr0
            for b in range(per_epoch):
                idx = np.sort(order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size])
                lr = poly_lr(it, total_iters, train_cfg.lr0, train_cfg.poly_power)
                params.zero_grad()
                try:
                    with Tape() as tape:
                        res = forward(dataset.images[idx], params)
                        terms = model_loss(res, dataset.masks[idx], params, weights)
                    total = terms.total.item()
                    if not math.isfinite(total):
                        raise NumericError("total loss is non-finite")
                    tape.backward(terms.total)
                except NumericError as e:
                    raise NumericError(f"epoch {epoch}, iteration {it}: {e}") from e
                grads = {k: t.grad for k, t in params.tensors.items() if t.grad is not None}
                if train_cfg.grad_clip:
                    clip_gradients(grads, train_cfg.grad_clip)
                adam_step({k: t.data for k, t in params.tensors.items()}, grads, state, lr,
                          train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
                for name, t in params.tensors.items():
                    if name in grads and not np.isfinite(t.data).all():
                        raise NumericError(f"epoch {epoch}, iteration {it}: parameter {name!r} became non-finite")
                row = [total, *terms.seg, terms.cycle]
                sums += row
                iter_losses.append(total)
                it += 1
            means = sums / per_epoch
            record = dict(zip(header, [epoch, it, lr, *means]))
            history.append(record)
            if writer:
                writer.writerow([_fmt(record[h]) for h in header])
                csv_file.flush()
            msg = f"epoch {epoch}/{train_cfg.epochs} loss {means[0]:.4f} cycle {means[-1]:.4f}"
            if val is not None:
                miou = evaluate(params, val, batch_size=train_cfg.batch_size).miou
                record["val_miou"] = miou
                msg += f" val mIOU {miou:.2f}"
                if best is None or miou > best:
                    best = miou
                    if out:
                        best_path = out / "best.ckpt"
                        save_checkpoint(params, best_path, {**extra_base, "epoch": epoch, "iter": it, "miou": miou})
            if out and train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
                save_checkpoint(params, out / f"epoch_{epoch:03d}.ckpt", {**extra_base, "epoch": epoch, "iter": it})
            if log:
                log(msg)
    finally:
        if csv_file:
            csv_file.close()

    last = None
    if out:
        last = out / "last.ckpt"
        save_checkpoint(params, last, {**extra_base, "epoch": train_cfg.epochs, "iter": it})
    return TrainResult(params, history, iter_losses, best, best_path or last,
                       out / "loss.csv" if out else None)


def pixel_accuracy(params: ModelParams, dataset: Dataset) -> float:
    _, masks = predict(dataset.images, params)
    return float((masks == dataset.masks).mean())


# ---------------------------------------------------------------------------
# ablations

ACCRETION_LABELS = ("Baseline", "+ MLP", "+ Cross-view Correlation", "+ Cycle Structure",
                    "+ Feature Selection", "+ Multi-scale FTVPs", "+ Deep Supervision")
# (K, V) in the published row order
KV_ROWS = (("X'", "X'", "Q-only"), ("X''", "X''", "K=X''&V=X''"), ("X", "X", "K=X&V=X"),
           ("X''", "X", "K=X''&V=X"), ("X", "X''", "K=X&V=X''"))
SUITES = ("accretion", "kv_combos")


def ablation_variants(suite: str, base: NetConfig) -> list[tuple[str, NetConfig]]:
    """The ordered (label, config) pairs of a suite; each row adds one thing to the row above."""
    single = (base.num_scales - 1,)
    rep = dataclasses.replace
    mode = base.ftvp.mlp_mode
    if suite == "accretion":
        opts = {
            "mlp": FtvpOptions(mlp_mode=mode, correlation=False, cycle=False, kv_mode="K=X&V=X"),
            "corr": FtvpOptions(mlp_mode=mode, cycle=False, selection=False, kv_mode="K=X&V=X"),
            "cycle": FtvpOptions(mlp_mode=mode, selection=False, kv_mode="K=X&V=X''"),
            "select": FtvpOptions(mlp_mode=mode, kv_mode="K=X&V=X''"),
        }
        return [
            ("Baseline", rep(base, use_ftvp=False, ftvp_scales=single, deep_supervision=False)),
            ("+ MLP", rep(base, ftvp=opts["mlp"], ftvp_scales=single, deep_supervision=False)),
            ("+ Cross-view Correlation", rep(base, ftvp=opts["corr"], ftvp_scales=single, deep_supervision=False)),
            ("+ Cycle Structure", rep(base, ftvp=opts["cycle"], ftvp_scales=single, deep_supervision=False)),
            ("+ Feature Selection", rep(base, ftvp=opts["select"], ftvp_scales=single, deep_supervision=False)),
            ("+ Multi-scale FTVPs", rep(base, ftvp=opts["select"], deep_supervision=False)),
            ("+ Deep Supervision", rep(base, ftvp=opts["select"], deep_supervision=True)),
        ]
    if suite == "kv_combos":
        return [(f"K={k} V={v}", rep(base, use_ftvp=True, ftvp=dataclasses.replace(base.ftvp, kv_mode=mode_name)))
                for k, v, mode_name in KV_ROWS]
    raise ValueError(f"unknown ablation suite {suite!r}; choose from {SUITES}")


@dataclass
class AblationRow:
    label: str
    miou: float
    map: float
    num_params: int
    final_loss: float


def run_ablation(suite: str, base: NetConfig, train_cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset,
                 log: Optional[Callable[[str], None]] = None,
                 out_dir: Optional[str | Path] = None) -> list[AblationRow]:
    """Train and evaluate every variant with the same seed and data; rows in the published order."""
    rows = []
    for k, (label, cfg) in enumerate(ablation_variants(suite, base)):
        sub = Path(out_dir) / f"{k:02d}" if out_dir else None
        res = train(train_ds, cfg, train_cfg, sub)
        rep = evaluate(res.params, test_ds, batch_size=train_cfg.batch_size)
        rows.append(AblationRow(label, rep.miou, rep.map, res.params.count(), res.history[-1]["total"]))
        if log:
            log(f"{suite} [{label}] mIOU {rep.miou:.2f} mAP {rep.map:.2f}")
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "mIOU", "mAP", "params", "final_loss"])
        for r in rows:
            w.writerow([r.label, _fmt(r.miou), _fmt(r.map), r.num_params, _fmt(r.final_loss)])


# ---------------------------------------------------------------------------
# panorama

@dataclass
class Panorama:
    mask: np.ndarray        # [H,W] class ids; unobserved cells hold 0
    observed: np.ndarray    # [H,W] bool
    x_top: float            # world x of the top edge
    y_left: float           # world y of the left edge
    res: float

    def grid(self) -> GridConfig:
        rows, cols = self.mask.shape
        return GridConfig(self.x_top - rows * self.res, self.x_top, self.y_left - cols * self.res,
                          self.y_left, rows)


def _footprint(grid: GridConfig, pose) -> np.ndarray:
    px, py, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    corners = np.array([[grid.x_min, grid.y_min], [grid.x_min, grid.y_max],
                        [grid.x_max, grid.y_min], [grid.x_max, grid.y_max]])
    return corners @ np.array([[c, s], [-s, c]]) + [px, py]


def stitch_panorama(masks: Sequence[np.ndarray], poses: Sequence[tuple], grid: GridConfig) -> Panorama:
    """Composite per-frame masks into one world-aligned map; later frames win where they overlap.

    The world grid has cell edges on integer multiples of the resolution, so
    frames whose poses are whole-cell translations land on it exactly.
    """
    if len(masks) == 0:
        raise ValueError("stitch_panorama: empty sequence")
    if len(masks) != len(poses):
        raise ValueError(f"stitch_panorama: {len(masks)} masks but {len(poses)} poses")
    res = grid.res
    rows_f, cols_f = grid.shape
    for m in masks:
        if m.shape != (rows_f, cols_f):
            raise ValueError(f"stitch_panorama: mask shape {m.shape} does not match the grid {grid.shape}")
    pts = np.concatenate([_footprint(grid, p) for p in poses])
    x_top = math.ceil(pts[:, 0].max() / res - 1e-9) * res
    x_bot = math.floor(pts[:, 0].min() / res + 1e-9) * res
    y_left = math.ceil(pts[:, 1].max() / res - 1e-9) * res
    y_right = math.floor(pts[:, 1].min() / res + 1e-9) * res
    rows = int(round((x_top - x_bot) / res))
    cols = int(round((y_left - y_right) / res))
    X = x_top - (np.arange(rows)[:, None] + 0.5) * res
    Y = y_left - (np.arange(cols)[None, :] + 0.5) * res
    out = np.zeros((rows, cols), dtype=np.asarray(masks[0]).dtype)
    seen = np.zeros((rows, cols), dtype=bool)
    for m, (px, py, yaw) in zip(masks, poses):
        c, s = math.cos(yaw), math.sin(yaw)
        dx, dy = X - px, Y - py
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        i = np.floor((grid.x_max - lx) / res).astype(np.int64)
        j = np.floor((grid.y_max - ly) / res).astype(np.int64)
        ok = (i >= 0) & (i < rows_f) & (j >= 0) & (j < cols_f)
        out[ok] = m[i[ok], j[ok]]
        seen |= ok
    return Panorama(out, seen, x_top, y_left, res)
