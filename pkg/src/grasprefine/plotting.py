"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keep PNG bytes stable across runs
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_sweep(grids: dict, path, title: str = "Grasp accuracy vs angle threshold") -> None:
    """One line per (method, IoU threshold); x axis is the angle threshold."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, grid in grids.items():
        angles = [math.degrees(a) for a in grid.angles]
        order = np.argsort(angles)
        for j, iou in enumerate(grid.ious):
            ax.plot(np.array(angles)[order], 100 * grid.accuracy[order, j], marker="o",
                    label=f"{name}, IoU > {iou:g}")
    ax.set_xlabel("angle threshold [deg]")
    ax.set_ylabel("grasp accuracy [%]")
    ax.set_ylim(0, 102)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    _finish(fig, path)


def plot_sweep_heatmap(grid, path) -> None:
    fig, ax = plt.subplots(figsize=(1.2 * len(grid.ious) + 2, 0.5 * len(grid.angles) + 1.5))
    im = ax.imshow(100 * grid.accuracy, vmin=0, vmax=100, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(grid.ious)), [f"{v:g}" for v in grid.ious])
    ax.set_yticks(range(len(grid.angles)), [f"{math.degrees(a):g}" for a in grid.angles])
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("angle threshold [deg]")
    for i in range(len(grid.angles)):
        for j in range(len(grid.ious)):
            ax.text(j, i, f"{100 * grid.accuracy[i, j]:.1f}", ha="center", va="center",
                    color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="accuracy [%]")
    _finish(fig, path)


def plot_training_curve(curve, path) -> None:
    epochs = [e for e, _ in curve]
    losses = [l for _, l in curve]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.semilogy(epochs, losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean refinement loss")
    ax.grid(alpha=0.3, which="both")
    _finish(fig, path)


def plot_per_class(per_class: dict, path, names=None) -> None:
    keys = sorted(per_class)
    labels = [names.get(k, str(k)) if names else str(k) for k in keys]
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(keys) + 2), 3.5))
    ax.bar(range(len(keys)), [100 * per_class[k] for k in keys])
    ax.set_xticks(range(len(keys)), labels, rotation=90, fontsize=7)
    ax.set_ylabel("grasp accuracy [%]")
    ax.set_ylim(0, 100)
    _finish(fig, path)
