"""Report figures written to PNG files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import PairedResult  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible across runs
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curve(history: Sequence[Mapping], path: str | Path, key: str = "nll",
                    title: str = "training NLL per epoch") -> Path:
    epochs = [int(r.get("epoch", i)) for i, r in enumerate(history)]
    values = [float(r[key]) for r in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, values, marker="o", lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel(key)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_paired(comparisons: Mapping[str, PairedResult], path: str | Path) -> Path:
    """Mean paired difference with its bootstrap interval, one row per comparison."""
    names = list(comparisons)
    fig, ax = plt.subplots(figsize=(5, 0.8 + 0.7 * max(len(names), 1)))
    for row, name in enumerate(names):
        res = comparisons[name]
        ax.errorbar(res.mean_difference, row,
                    xerr=[[res.mean_difference - res.ci_low], [res.ci_high - res.mean_difference]],
                    fmt="o", capsize=4, color="tab:blue" if res.excludes_zero else "tab:gray")
    ax.axvline(0.0, color="k", lw=0.8, ls="--")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.set_ylim(-0.7, len(names) - 0.3)
    ax.set_xlabel("mean paired difference (95% bootstrap CI)")
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_samples(rows: Mapping[str, np.ndarray], path: str | Path, max_cols: int = 8) -> Path:
    """Grid of images: one labelled row per entry, each an (n, H, W) stack in [0, 1]."""
    labels = list(rows)
    cols = min(max_cols, max(len(v) for v in rows.values()))
    fig, axes = plt.subplots(len(labels), cols, figsize=(1.1 * cols + 1.2, 1.2 * len(labels)), squeeze=False)
    for r, label in enumerate(labels):
        for c in range(cols):
            ax = axes[r, c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c < len(rows[label]):
                ax.imshow(np.clip(rows[label][c], 0.0, 1.0), cmap="gray", vmin=0.0, vmax=1.0,
                          interpolation="nearest")
            else:
                ax.axis("off")
        axes[r, 0].set_ylabel(label, rotation=0, ha="right", va="center", fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(path))
