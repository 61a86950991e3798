"""Matplotlib figures for training logs and ablation tables (files only, no display)."""
from __future__ import annotations

import json
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TERMS = ("class", "l1", "giou", "mask", "total")


def read_log(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _smooth(y: np.ndarray, k: int) -> np.ndarray:
    if k <= 1 or len(y) < k:
        return y
    c = np.cumsum(np.insert(y, 0, 0.0))
    return (c[k:] - c[:-k]) / k


def plot_loss_curve(records: list[dict], path: str | os.PathLike, window: int = 50) -> Path:
    it = np.array([r["iter"] for r in records])
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    for term in TERMS:
        y = _smooth(np.array([r[term] for r in records], dtype=float), window)
        ax = axes[0] if term == "total" or term == "class" else axes[1]
        ax.plot(it[len(it) - len(y):], y, label=term, lw=1.2)
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.set_yscale("log")
        ax.legend(frameon=False)
    axes[0].set_ylabel(f"loss (moving mean, {window})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_ablation(table, path: str | os.PathLike) -> Path:
    """Bars of median AP50 per grid value with the individual seeds overlaid."""
    labels = [str(r["value"]) for r in table.rows]
    med = [100 * r["median_AP50"] for r in table.rows]
    fig, ax = plt.subplots(figsize=(1.4 * len(labels) + 2, 3.4))
    x = np.arange(len(labels))
    ax.bar(x, med, color="#7a9cc6", width=0.6)
    for i, r in enumerate(table.rows):
        pts = [100 * m["box_AP50"] for m in r["seeds"].values()]
        ax.scatter(np.full(len(pts), x[i]), pts, color="k", s=10, zorder=3)
        ax.text(x[i], med[i] + 0.5, f"{med[i]:.1f}", ha="center", va="bottom", fontsize=8)
    ax.set_xticks(x, labels)
    ax.set_xlabel(table.key)
    ax.set_ylabel("box AP50 (median of seeds)")
    lo = min(min(100 * m["box_AP50"] for r in table.rows for m in r["seeds"].values()), min(med))
    ax.set_ylim(max(0.0, lo - 10), 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_attention(attn: np.ndarray, outliers, path: str | os.PathLike) -> Path:
    """Heat map of one category's PFSM attention matrix; outlier prompts marked."""
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(attn, cmap="viridis", vmin=0)
    n = attn.shape[0]
    ticks = [f"{i}*" if outliers[i] else str(i) for i in range(n)]
    ax.set_xticks(range(n), ticks, fontsize=7)
    ax.set_yticks(range(n), ticks, fontsize=7)
    ax.set_xlabel("key prompt (* outlier)")
    ax.set_ylabel("query prompt")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
