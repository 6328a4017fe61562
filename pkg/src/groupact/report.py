"""Figure rendering for training runs, ablations, and cluster inspection.

All figures are written straight to files with the Agg backend, so the
functions work in headless runs.  Paths are returned for logging.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def training_curves(history, path):
    """Loss and accuracy curves over epochs, side by side."""
    epochs = [row["epoch"] for row in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [row["train_loss"] for row in history],
                 label="train loss")
    ax_loss.plot(epochs, [row["val_loss"] for row in history],
                 label="val loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [row["group_acc"] for row in history],
                label="group accuracy")
    ax_acc.plot(epochs, [row["ind_acc"] for row in history],
                label="individual accuracy")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def ablation_chart(rows, path):
    """Grouped bars of both accuracies per ablation arm."""
    arms = [row["arm"] for row in rows]
    x = np.arange(len(arms))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.6 * len(arms) + 2, 4))
    ax.bar(x - width / 2, [row["group_acc"] for row in rows], width,
           label="group accuracy")
    ax.bar(x + width / 2, [row["ind_acc"] for row in rows], width,
           label="individual accuracy")
    ax.set_xticks(x)
    ax.set_xticklabels(arms, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def cluster_scatter(boxes, labels, path, max_frames=4):
    """Agent positions colored by cluster, one panel per frame.

    boxes: [T, N, 4] (center x, center y, width, height) in [0, 1];
    labels: [T, N] integer cluster ids for one block.
    """
    boxes = np.asarray(boxes)
    labels = np.asarray(labels)
    t_total = boxes.shape[0]
    frames = np.linspace(0, t_total - 1, min(max_frames, t_total)).astype(int)
    fig, axes = plt.subplots(1, len(frames),
                             figsize=(3.2 * len(frames), 3.4), squeeze=False)
    for ax, t in zip(axes[0], frames):
        ax.scatter(boxes[t, :, 0], boxes[t, :, 1], c=labels[t], cmap="tab10",
                   vmin=0, vmax=9, s=60, edgecolors="black", linewidths=0.5)
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.0)
        ax.set_title(f"frame {t}")
        ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
