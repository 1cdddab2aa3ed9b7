"""PNG figures written next to the CSV results of the experiment commands.

matplotlib is imported on first use so the rest of the package never needs it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import AccuracyRow, Histogram


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"figure.dpi": 120, "font.size": 9, "axes.spines.top": False, "axes.spines.right": False})
    return plt


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    return path


def cos_histogram_figure(hist: Histogram, path: str | Path, title: str = "COS distribution") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    labels = [f"[{int(lo) + (1 if lo > 0 else 0)}:{int(hi)}]" for lo, hi, _ in hist.rows()]
    bars = ax.bar(range(len(hist.counts)), hist.counts, color="#4C72B0", width=0.8)
    ax.bar_label(bars, fontsize=7)
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_xlabel("COS (%)")
    ax.set_ylabel("devices")
    ax.set_title(f"{title} (n={hist.total})")
    try:
        return _save(fig, path)
    finally:
        plt.close(fig)


def accuracy_figure(rows: Sequence[AccuracyRow], path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    names = [f"{r.n}x{r.m}" for r in rows]
    acc = np.array([100.0 * r.accuracy for r in rows])
    ax.bar(names, acc, color="#55A868")
    lo = min(99.0, float(acc.min()) - 0.5) if len(acc) else 99.0
    ax.set_ylim(lo, 100.05)
    ax.axhline(99.9, color="0.4", lw=0.8, ls="--")
    ax.set_ylabel("prediction accuracy (%)")
    ax.set_xlabel("PUF size")
    try:
        return _save(fig, path)
    finally:
        plt.close(fig)


def distance_figure(distances: np.ndarray, path: str | Path, mean: float) -> Path:
    """Per-device mean inter-chip distance."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.hist(100.0 * np.asarray(distances), bins=20, color="#C44E52")
    ax.axvline(100.0 * mean, color="k", lw=0.8)
    ax.set_xlabel("mean Hamming distance to other devices (%)")
    ax.set_ylabel("devices")
    try:
        return _save(fig, path)
    finally:
        plt.close(fig)
