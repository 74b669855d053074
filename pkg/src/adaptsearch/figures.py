"""Figure rendering for the report path; PNGs land next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_ablation_figure(methods, means, halfwidths, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(methods))
    ax.bar(x, means, yerr=halfwidths, capsize=4, color="tab:blue", alpha=0.85)
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=20, ha="right")
    ax.set_ylabel("mean query accuracy")
    ax.set_title("Per-method accuracy (95% CI), all test domains pooled")
    ax.grid(axis="y", linewidth=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_correlation_figure(correlations, defined, path) -> None:
    """2 x K heatmap: decision bit vs fitness correlation; undefined cells blank."""
    k = len(correlations) // 2
    grid = np.full((2, k), np.nan)
    for i in range(k):
        if defined[2 * i]:
            grid[0, i] = correlations[2 * i]
        if defined[2 * i + 1]:
            grid[1, i] = correlations[2 * i + 1]
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * k), 2.6))
    im = ax.imshow(grid, cmap="RdYlGn", vmin=-1.0, vmax=1.0, aspect="auto")
    ax.set_yticks([0, 1])
    ax.set_yticklabels(["adapter", "fine-tune"])
    ax.set_xticks(range(k))
    ax.set_xlabel("layer")
    ax.set_title("Decision-fitness point-biserial correlation")
    fig.colorbar(im, ax=ax, shrink=0.9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_history_figure(records, path) -> None:
    """Fitness of every evaluated path against generation, with the running best."""
    gens = np.asarray([r.generation for r in records])
    fits = np.asarray([r.fitness for r in records])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(gens, fits, s=12, alpha=0.5, label="evaluated path")
    uniq = np.unique(gens)
    best = [fits[gens <= g].max() for g in uniq]
    ax.plot(uniq, best, color="tab:red", linewidth=1.5, label="best so far")
    ax.set_xlabel("generation")
    ax.set_ylabel("fitness (mean NCC accuracy)")
    ax.set_title("Search history")
    ax.legend()
    ax.grid(linewidth=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
