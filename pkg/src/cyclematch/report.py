"""Figure rendering for the CLI report paths.

Every figure is written as PNG through the Agg backend with software
metadata stripped, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE_KW = {"metadata": {"Software": None}, "dpi": 110}


def save_heatmap(path, grid: np.ndarray, title: str = "", vmin=None, vmax=None) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(grid, cmap="viridis", vmin=vmin, vmax=vmax, interpolation="nearest")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_label_mask(path, mask: np.ndarray, num_classes: int, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.0, 3.6))
    ax.imshow(mask, cmap="tab10", vmin=0, vmax=max(num_classes, 9), interpolation="nearest")
    if title:
        ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_metrics_bars(path, per_class_iou: dict, per_class_dice: dict, title: str = "") -> None:
    classes = sorted(per_class_iou)
    xs = np.arange(len(classes))
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    ax.bar(xs - 0.18, [per_class_iou[c] for c in classes], width=0.36, label="IoU")
    ax.bar(xs + 0.18, [per_class_dice[c] for c in classes], width=0.36, label="Dice")
    ax.set_xticks(xs)
    ax.set_xticklabels([str(c) for c in classes])
    ax.set_xlabel("class")
    ax.set_ylim(0, 1.05)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_curve(path, values, title: str = "", ylabel: str = "loss") -> None:
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    ax.plot(np.arange(1, len(values) + 1), values, marker="" if len(values) > 40 else "o")
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
