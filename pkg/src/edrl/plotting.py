"""Figures written straight to files (Agg backend, no display needed)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def correlation_heatmap(c: np.ndarray, common: int, path, title: str = "cross-modal correlation") -> Path:
    """Diverging map on [-1, 1] with the common/unique boundary marked."""
    with plt.rc_context(_STYLE | {"axes.grid": False}):
        fig, ax = plt.subplots(figsize=(4.6, 4.0))
        im = ax.imshow(c, cmap="RdBu_r", vmin=-1.0, vmax=1.0)
        edge = common - 0.5
        ax.axhline(edge, color="k", lw=0.8)
        ax.axvline(edge, color="k", lw=0.8)
        ax.set_xlabel("M2 channel")
        ax.set_ylabel("M1 channel")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, path)


def sweep_plot(rows, path, param: str) -> Path:
    """Per-seed accuracy curves (thin) and their median (thick)."""
    by_seed = defaultdict(list)
    for r in rows:
        by_seed[r.seed].append((r.value, r.acc))
    values = sorted({r.value for r in rows})
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.2))
        for seed, pts in sorted(by_seed.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], color="0.6", lw=0.8, marker=".", label=None)
        med = [np.median([r.acc for r in rows if r.value == v]) for v in values]
        ax.plot(values, med, color="C0", lw=2.0, marker="o", label="median")
        ax.set_xlabel(param)
        ax.set_ylabel("test accuracy")
        ax.legend(frameon=False)
        return _save(fig, path)


def regime_curves(history, path) -> Path:
    """Accuracy per epoch, one line per evaluated regime."""
    series = defaultdict(list)
    for rep in history:
        series[rep.regime].append((rep.epoch, rep.accuracy))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.2))
        for i, (regime, pts) in enumerate(sorted(series.items())):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], color=f"C{i}", label=regime)
        ax.set_xlabel("epoch")
        ax.set_ylabel("test accuracy")
        ax.legend(frameon=False)
        return _save(fig, path)


def embedding_scatter(x: np.ndarray, labels: np.ndarray, path) -> Path:
    """First two principal components of the fused features, coloured by class."""
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    if proj.shape[1] < 2:
        proj = np.column_stack([proj, np.zeros(len(proj))])
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.6))
        for k in np.unique(labels):
            sel = labels == k
            ax.scatter(proj[sel, 0], proj[sel, 1], s=8, color=f"C{int(k)}", label=f"class {int(k)}")
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend(frameon=False)
        return _save(fig, path)
