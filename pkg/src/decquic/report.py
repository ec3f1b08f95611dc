"""Render report figures next to the CSV outputs.

The CSVs stay the authoritative interface; these are quick-look renderings
of the same data (a per-trace scatter, per-class percentile boxes, the label
histogram, and training curves).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .losses import K_CLASSES


def scatter_figure(trace_rows, out_path: str | Path, point_alpha: float = 0.25) -> Path:
    """True vs predicted per-trace response sums with the identity diagonal."""
    out_path = Path(out_path)
    true_sums = [r[1] for r in trace_rows]
    pred_sums = [r[2] for r in trace_rows]
    lim = max(true_sums + pred_sums + [1]) * 1.05

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, lim], [0, lim], color="gray", lw=1, ls="--", zorder=1)
    ax.scatter(true_sums, pred_sums, s=14, alpha=point_alpha, color="tab:blue", zorder=2)
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.set_xlabel("true response count per trace")
    ax.set_ylabel("predicted response count per trace")
    ax.set_title(f"trace aggregation ({len(trace_rows)} traces)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def per_class_box_figure(class_stats, out_path: str | Path) -> Path:
    """25-75% prediction boxes with median line, one box per true class."""
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for row in class_stats:
        c = row["class"]
        ax.add_patch(
            plt.Rectangle(
                (c - 0.35, row["p25"]), 0.7, max(row["p75"] - row["p25"], 0.08),
                facecolor="lightsteelblue", edgecolor="navy", lw=0.8,
            )
        )
        ax.plot([c - 0.35, c + 0.35], [row["p50"], row["p50"]], color="red", lw=1.4)
    classes = [row["class"] for row in class_stats]
    lim = max(classes + [row["p75"] for row in class_stats] + [1]) + 1
    ax.plot([-0.5, lim], [-0.5, lim], color="gray", lw=0.8, ls=":")
    ax.set_xlim(-0.8, max(classes) + 0.8)
    ax.set_ylim(-0.5, lim)
    ax.set_xlabel("true class")
    ax.set_ylabel("predicted class")
    ax.set_title("per-class prediction percentiles")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def label_histogram_figure(labels, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    labels = np.asarray(labels)
    hist = np.bincount(labels, minlength=K_CLASSES)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(np.arange(len(hist)), hist, color="tab:green", width=0.8)
    ax.set_xlabel("response count (class)")
    ax.set_ylabel("images")
    ax.set_title(f"label distribution ({labels.size} images)")
    ax.set_xticks(np.arange(0, len(hist), 2))
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def training_curves_figure(history, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(epochs, [h["train_loss"] for h in history], label="train")
    ax1.plot(epochs, [h["val_loss"] for h in history], label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [h["val_cap1"] for h in history], color="tab:purple")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation CAP±1")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
