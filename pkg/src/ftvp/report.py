"""Figures for run directories. Everything renders off-screen to PNG files."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data_synth import PALETTE, class_names  # noqa: E402


def colorize(mask: np.ndarray, num_classes: int, observed: np.ndarray | None = None) -> np.ndarray:
    """Class ids [h,w] -> RGB uint8 [h,w,3]; unobserved cells are white."""
    pal = np.array([PALETTE[n] for n in class_names(num_classes)], dtype=np.uint8)
    rgb = pal[np.asarray(mask)]
    if observed is not None:
        rgb[~observed] = 255
    return rgb


def _legend(ax, num_classes: int) -> None:
    from matplotlib.patches import Patch
    handles = [Patch(color=np.array(PALETTE[n]) / 255, label=n) for n in class_names(num_classes)]
    ax.legend(handles=handles, loc="upper left", bbox_to_anchor=(1.01, 1.0), fontsize=7, frameon=False)


def plot_loss_curve(csv_path: str | Path, out_path: str | Path) -> Path:
    with open(csv_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{csv_path}: no rows to plot")
    epochs = [int(r["epoch"]) for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(epochs, [float(r["total"]) for r in rows], label="total", lw=2)
    for key in rows[0]:
        if key.startswith("seg_"):
            ax1.plot(epochs, [float(r[key]) for r in rows], label=key, lw=1)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=7)
    ax2.plot(epochs, [float(r["cycle_total"]) for r in rows], color="tab:purple")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("cycle loss (sum over scales)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return Path(out_path)


def plot_ablation(labels: Sequence[str], miou: Sequence[float], map_: Sequence[float], out_path: str | Path,
                  title: str = "") -> Path:
    y = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(labels) + 1.2))
    ax.barh(y - 0.2, miou, height=0.4, label="mIOU %")
    ax.barh(y + 0.2, map_, height=0.4, label="mAP %")
    ax.set_yticks(y)
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("%")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return Path(out_path)


def plot_masks(image: np.ndarray, pred: np.ndarray, num_classes: int, out_path: str | Path,
               truth: np.ndarray | None = None) -> Path:
    """Front view next to the predicted (and optionally true) top-view mask."""
    panels = [("front view", image.transpose(1, 2, 0)), ("prediction", colorize(pred, num_classes))]
    if truth is not None:
        panels.append(("ground truth", colorize(truth, num_classes)))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels) + 1.2, 3.2))
    for ax, (name, arr) in zip(axes, panels):
        ax.imshow(arr, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    _legend(axes[-1], num_classes)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return Path(out_path)


def plot_panorama(mask: np.ndarray, observed: np.ndarray, num_classes: int, out_path: str | Path,
                  poses: Sequence[tuple] = (), x_top: float = 0.0, y_left: float = 0.0, res: float = 1.0) -> Path:
    """Stitched map with the driven trajectory; x points up, y to the left."""
    rows, cols = mask.shape
    fig, ax = plt.subplots(figsize=(max(3.0, 6 * cols / rows) + 1.5, 6))
    extent = (y_left, y_left - cols * res, x_top - rows * res, x_top)
    ax.imshow(colorize(mask, num_classes, observed), extent=extent, interpolation="nearest")
    if poses:
        p = np.asarray(poses)
        ax.plot(p[:, 1], p[:, 0], "w.-", lw=1, ms=4)
    ax.set_xlabel("y (m)")
    ax.set_ylabel("x (m)")
    _legend(ax, num_classes)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return Path(out_path)
