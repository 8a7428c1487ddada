"""Matplotlib rendering of attention heat maps and training curves.

Figures are written straight to files; everything uses the Agg backend so
exports work in headless runs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_heatmap(matrix, row_labels, col_labels, path, title: str = "",
                   value_label: str = "probability") -> None:
    """Render a labeled probability matrix to an image file."""
    matrix = np.asarray(matrix, dtype=float)
    rows, cols = matrix.shape
    fig_width = max(4.0, 0.38 * cols + 2.2)
    fig_height = max(3.0, 0.30 * rows + 1.5)
    fig, ax = plt.subplots(figsize=(fig_width, fig_height))
    image = ax.imshow(matrix, aspect="auto", cmap="viridis", vmin=0.0,
                      vmax=max(1.0, float(matrix.max())))
    ax.set_xticks(range(cols))
    ax.set_xticklabels(col_labels, rotation=90, fontsize=7)
    ax.set_yticks(range(rows))
    ax.set_yticklabels(row_labels, fontsize=7)
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(image, ax=ax, label=value_label)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_loss_curve(loss_log, path) -> None:
    """Plot per-epoch training and validation NLL."""
    epochs = [entry["epoch"] for entry in loss_log]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(epochs, [entry["train_nll"] for entry in loss_log],
            marker="o", label="train")
    if any(entry.get("valid_nll") is not None for entry in loss_log):
        ax.plot(epochs, [entry["valid_nll"] for entry in loss_log],
                marker="s", label="valid")
    ax.set_xlabel("epoch")
    ax.set_ylabel("NLL per token")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
