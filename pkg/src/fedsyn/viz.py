"""Plot helpers: accuracy curves and synthetic-image grids."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch


def save_accuracy_curves(records: list[dict], path: str | Path) -> Path:
    """One line per run record; x = epoch of each eval event."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for rec in records:
        curve = rec["curve"]
        xs = [p["epoch"] for p in curve]
        ys = [p["acc"] for p in curve]
        label = f"{rec['method']} a={rec['alpha']} m={rec['m']} s={rec['seed']}"
        ax.plot(xs, ys, marker="o", markersize=2.5, linewidth=1, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    if len(records) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_image_grid(images: torch.Tensor, path: str | Path, per_row: int = 8) -> Path:
    """Dump a batch of (N, C, H, W) images as one PNG, min-max scaled."""
    x = images.detach().cpu().float()
    n = x.shape[0]
    rows = math.ceil(n / per_row)
    fig, axes = plt.subplots(rows, per_row, figsize=(per_row * 1.1, rows * 1.1))
    axes = np.atleast_2d(axes)
    for i in range(rows * per_row):
        ax = axes[i // per_row, i % per_row]
        ax.axis("off")
        if i >= n:
            continue
        img = x[i]
        lo, hi = float(img.min()), float(img.max())
        img = (img - lo) / (hi - lo + 1e-12)
        if img.shape[0] == 1:
            ax.imshow(img[0].numpy(), cmap="gray", vmin=0, vmax=1)
        else:
            ax.imshow(img.permute(1, 2, 0).clamp(0, 1).numpy())
    fig.tight_layout(pad=0.1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
