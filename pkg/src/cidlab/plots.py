"""Static plot emission: loss curves from the metrics stream, 2D scatter
overlays, and LQ/SR/HQ image grids."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch


def read_metrics(path) -> list:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def plot_loss_curves(rows: Sequence[dict], out_png, smooth: int = 25) -> Path:
    """One panel per phase, each numeric series smoothed with a running
    mean."""
    phases = sorted({r["phase"] for r in rows})
    fig, axes = plt.subplots(1, max(1, len(phases)), figsize=(5 * len(phases), 4),
                             squeeze=False)
    for ax, phase in zip(axes[0], phases):
        sub = [r for r in rows if r["phase"] == phase]
        keys = [k for k in sub[0] if k not in ("phase", "iter")
                and isinstance(sub[0][k], (int, float))]
        xs = [r["iter"] for r in sub]
        for key in keys:
            ys = np.array([r[key] for r in sub], dtype=np.float64)
            if len(ys) >= smooth:
                kernel = np.ones(smooth) / smooth
                ys = np.convolve(ys, kernel, mode="valid")
                x_plot = xs[smooth - 1:]
            else:
                x_plot = xs
            ax.plot(x_plot, ys, label=key, linewidth=1)
        ax.set_title(phase)
        ax.set_xlabel("iteration")
        ax.legend(fontsize=7)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_scatter_overlay(data: torch.Tensor, generated: torch.Tensor, out_png,
                         degraded: Optional[torch.Tensor] = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    d = data.detach().numpy()
    g = generated.detach().numpy()
    ax.scatter(d[:, 0], d[:, 1], s=4, alpha=0.4, label="data")
    if degraded is not None:
        q = degraded.detach().numpy()
        ax.scatter(q[:, 0], q[:, 1], s=4, alpha=0.25, label="degraded")
    ax.scatter(g[:, 0], g[:, 1], s=4, alpha=0.4, label="restored")
    ax.legend()
    ax.set_aspect("equal")
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_image_grid(lq: torch.Tensor, sr: torch.Tensor, hq: torch.Tensor,
                    out_png, n: int = 8) -> Path:
    """Rows LQ / SR / HQ for the first n samples."""
    n = min(n, len(lq))
    fig, axes = plt.subplots(3, n, figsize=(1.2 * n, 3.8))
    for row, (name, batch) in enumerate((("LQ", lq), ("SR", sr), ("HQ", hq))):
        for col in range(n):
            ax = axes[row, col] if n > 1 else axes[row]
            img = batch[col].detach().clamp(0, 1).permute(1, 2, 0).numpy()
            ax.imshow(img)
            ax.set_xticks([])
            ax.set_yticks([])
            if col == 0:
                ax.set_ylabel(name)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
