"""Matplotlib figures for run reports (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_comparison(metrics: Sequence[str], base: dict, personalized: dict[str, dict], path) -> Path:
    """Grouped bars: the base encoder next to every personalized run."""
    series = [("base", base)] + sorted(personalized.items())
    x = np.arange(len(metrics))
    width = 0.8 / len(series)
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(metrics)), 3.6))
    for i, (label, values) in enumerate(series):
        ax.bar(x + (i - (len(series) - 1) / 2) * width,
               [values.get(m, np.nan) for m in metrics], width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(metrics, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean over instances")
    ax.legend(fontsize=7, loc="upper left")
    return _save(fig, path)


def plot_diversity_fidelity(diversity, fidelity, accuracy, path, label: str = "PR-AUC") -> Path:
    fig, ax = plt.subplots(figsize=(4.6, 3.8))
    pts = ax.scatter(diversity, fidelity, c=accuracy, cmap="viridis", vmin=0, vmax=1, s=28)
    fig.colorbar(pts, ax=ax, label=label)
    ax.set_xlabel("diversity (1 - mean pairwise cosine)")
    ax.set_ylabel("fidelity (cosine to reference mean)")
    return _save(fig, path)


def plot_scaling(n_real, series: dict[str, Sequence[float]], path, metric: str) -> Path:
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    order = np.argsort(n_real)
    xs = np.asarray(n_real)[order]
    for label, ys in sorted(series.items()):
        ax.plot(xs, np.asarray(ys)[order], marker="o", label=label)
    ax.set_xlabel("real images per instance")
    ax.set_ylabel(metric)
    ax.set_xticks(sorted(set(int(v) for v in xs)))
    ax.legend(fontsize=8)
    return _save(fig, path)
