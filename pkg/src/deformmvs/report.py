"""Figure rendering for the report paths: depth-map panels next to the
evaluation CSV, training curves next to the metrics log, and ablation bars
next to the comparison table."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport


def save_depth_figure(pred: np.ndarray, gt: np.ndarray, path, title: str = "") -> None:
    """Side-by-side predicted/true depth with a signed error panel."""
    vmin = float(np.nanmin(gt))
    vmax = float(np.nanmax(gt))
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.2))
    for ax, (img, name) in zip(axes, [(pred, "predicted"), (gt, "ground truth")]):
        im = ax.imshow(img, vmin=vmin, vmax=vmax, cmap="viridis")
        ax.set_title(name)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    err = pred - gt
    lim = max(1e-6, float(np.nanpercentile(np.abs(err), 98)))
    im = axes[2].imshow(err, vmin=-lim, vmax=lim, cmap="coolwarm")
    axes[2].set_title("error (m)")
    axes[2].axis("off")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metrics_figure(names: list[str], reports: list[EvalReport], path) -> None:
    """Per-scene bars for MAE and the two accuracy fractions."""
    x = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(6.0, 1.2 * len(names) + 3), 3.4))
    ax1.bar(x, [r.mae for r in reports], color="#d95f02")
    ax1.set_xticks(x, names, rotation=45, ha="right", fontsize=8)
    ax1.set_ylabel("MAE (m)")
    width = 0.38
    ax2.bar(x - width / 2, [r.acc_06m for r in reports], width, label="<0.6 m")
    ax2.bar(x + width / 2, [r.acc_3interval for r in reports], width, label="<3 interval")
    ax2.set_xticks(x, names, rotation=45, ha="right", fontsize=8)
    ax2.set_ylim(0, 1.02)
    ax2.set_ylabel("fraction")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_training_curves(history: list[dict], path) -> None:
    """Loss and held-out MAE per epoch from the training history."""
    if not history:
        return
    epochs = [row["epoch"] for row in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    ax1.plot(epochs, [row["loss"] for row in history], marker="o")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax2.plot(epochs, [row["mae"] for row in history], marker="o", color="#d95f02")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("held-out MAE (m)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ablation_figure(variants: list[str], reports: list[EvalReport], path) -> None:
    save_metrics_figure(variants, reports, path)
