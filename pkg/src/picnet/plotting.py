"""Figures written next to the CSV/JSON outputs.  Agg backend, PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps reruns byte-identical
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return Path(path)


def plot_recall_curves(curves: dict, path, title: str = "Recall at top-N") -> Path:
    """``curves`` maps a label to a 25-vector of recall values in [0, 1]."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, recall in curves.items():
        recall = np.asarray(recall)
        ax.plot(np.arange(1, len(recall) + 1), 100 * recall, marker="o", ms=3, label=label)
    ax.set_xlabel("N (number of top database candidates)")
    ax.set_ylabel("Recall @ N (%)")
    ax.set_title(title)
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, loc="lower right")
    return _save(fig, path)


def plot_loss(history, path) -> Path:
    history = np.asarray(history, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(history, lw=0.8, alpha=0.5, label="per step")
    if len(history) >= 10:
        w = max(5, len(history) // 20)
        smooth = np.convolve(history, np.ones(w) / w, mode="valid")
        ax.plot(np.arange(w - 1, len(history)), smooth, lw=1.5, label=f"mean of {w}")
    ax.set_xlabel("step")
    ax.set_ylabel("lazy quadruplet loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_ablation(summary: list[dict], path) -> Path:
    """Bar chart of mean recall@1% with one standard error, one bar per row."""
    names = [r["variant"] for r in summary]
    mean = np.array([r["recall_at_1pct_mean"] for r in summary])
    err = np.array([r["recall_at_1pct_se"] for r in summary])
    night = np.array([r["night_recall_at_1pct_mean"] for r in summary])
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * len(names) + 2), 4))
    ax.bar(x - 0.2, mean, 0.4, yerr=err, capsize=3, label="all queries")
    ax.bar(x + 0.2, night, 0.4, label="night queries")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("Recall @ 1% (%)")
    ax.set_ylim(0, 100)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)
