"""Figures for training runs and ablation tables, written straight to image files."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

# fixed metadata keeps repeated renders byte-stable
_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=120, metadata=_META)
    return path


def _tidy(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.grid(alpha=0.3, linewidth=0.5)


def training_curve(history: list[dict], path, title: str = "") -> Path:
    """Training loss and validation NDCG@5 per epoch, best epoch marked."""
    epochs = [h["epoch"] for h in history]
    loss = [h["loss"] for h in history]
    val = [h["val_ndcg5"] for h in history]
    fig = Figure(figsize=(7.0, 3.2))
    ax1, ax2 = fig.subplots(1, 2)
    ax1.plot(epochs, loss, marker="o", markersize=3, color="tab:blue")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("BPR loss")
    ax2.plot(epochs, val, marker="o", markersize=3, color="tab:orange")
    if val:
        best = int(np.argmax(val))
        ax2.axvline(epochs[best], color="grey", linestyle="--", linewidth=0.8)
        ax2.annotate(f"best {val[best]:.4f}", (epochs[best], val[best]), textcoords="offset points",
                     xytext=(4, -12), fontsize=8)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val NDCG@5")
    for ax in (ax1, ax2):
        _tidy(ax)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def ablation_bars(means: dict[str, dict[str, float]], stds: dict[str, dict[str, float]], path,
                  metrics=("HR@5", "NDCG@5", "MRR")) -> Path:
    """Grouped bars per metric, one bar per variant, with std error bars."""
    variants = list(means)
    x = np.arange(len(metrics))
    width = 0.8 / max(len(variants), 1)
    fig = Figure(figsize=(7.0, 3.4))
    ax = fig.subplots()
    for k, v in enumerate(variants):
        ax.bar(x + (k - (len(variants) - 1) / 2) * width, [means[v][m] for m in metrics], width,
               yerr=[stds[v][m] for m in metrics], capsize=2, label=v)
    ax.set_xticks(x, metrics)
    ax.set_ylabel("score")
    ax.legend(fontsize=8, frameon=False, ncol=min(len(variants), 5))
    _tidy(ax)
    fig.tight_layout()
    return _save(fig, path)
