"""Figures written next to the text reports. Uses the non-interactive Agg backend."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalkit import PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS  # noqa: E402


def _save(fig, path):
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_curves(rep, path, label="tracker"):
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.6))
    a.plot(PRECISION_THRESHOLDS, rep.precision, label=f"{label} [{rep.pr20:.3f}]")
    a.axvline(20, color="0.7", lw=0.8, ls="--")
    a.set(xlabel="location error threshold (px)", ylabel="precision", ylim=(0, 1.02), title="Precision")
    b.plot(SUCCESS_THRESHOLDS, rep.success, label=f"{label} [{rep.auc:.3f}]")
    b.set(xlabel="overlap threshold", ylabel="success rate", ylim=(0, 1.02), title="Success")
    for ax in (a, b):
        ax.legend(loc="lower right" if ax is a else "upper right", fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_loss(trace, path, smooth=20):
    trace = np.asarray(trace, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(trace, color="0.75", lw=0.6, label="step")
    if len(trace) >= smooth:
        k = np.ones(smooth) / smooth
        ax.plot(np.arange(smooth - 1, len(trace)), np.convolve(trace, k, mode="valid"), label=f"mean of {smooth}")
    ax.set(xlabel="step", ylabel="loss", yscale="log", title="Training loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_ablation(rows, path):
    """``rows``: list of (name, mean AUC, std AUC)."""
    names = [r[0] for r in rows]
    means = np.array([r[1] for r in rows])
    stds = np.array([r[2] for r in rows])
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(rows)), 3.6))
    ax.bar(np.arange(len(rows)), means, yerr=stds, color="tab:blue", alpha=0.8, capsize=3)
    ax.set_xticks(np.arange(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set(ylabel="success AUC", title="Ablation")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
