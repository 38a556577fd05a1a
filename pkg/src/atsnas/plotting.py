"""Report figures written next to the CSV artifacts."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from scipy.stats import spearmanr  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def plot_trajectories(runs, path, target=None) -> None:
    """Accuracy, parameter count and grade of the trained child per
    iteration, one line per parent search."""
    fig, axes = plt.subplots(3, 1, figsize=(6, 6.5), sharex=True)
    for run in runs:
        rows = [r for r in run.trajectory if not r.stalled]
        if not rows:
            continue
        it = [r.iteration for r in rows]
        label = run.parent_hash[:8]
        axes[0].plot(it, [r.accuracy for r in rows], marker=".", lw=1, label=label)
        axes[1].plot(it, [r.params for r in rows], marker=".", lw=1)
        axes[2].plot(it, [r.grade for r in rows], marker=".", lw=1)
        acc = [r.iteration for r in rows if r.accepted]
        axes[2].plot(acc, [r.grade for r in rows if r.accepted], "k^", ms=3)
    if target is not None:
        axes[1].axhline(target, color="grey", ls="--", lw=0.8)
    axes[0].set_ylabel("accuracy (delta1)")
    axes[1].set_ylabel("parameters")
    axes[2].set_ylabel("grade")
    axes[2].set_xlabel("iteration")
    if any(r.trajectory for r in runs):
        axes[0].legend(title="parent", ncol=3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_tradeoff(evals, path, target=None, best_hash=None) -> None:
    """Accuracy against size for every trained genome, coloured by grade."""
    fig, ax = plt.subplots(figsize=(5, 3.8))
    if evals:
        params = np.array([e.params for e in evals])
        acc = np.array([e.accuracy for e in evals])
        grades = np.array([e.grade for e in evals])
        sc = ax.scatter(params, acc, c=grades, cmap="viridis", s=14)
        fig.colorbar(sc, ax=ax, label="grade")
        for e in evals:
            if e.hash == best_hash:
                ax.scatter([e.params], [e.accuracy], s=80, facecolors="none", edgecolors="red", label="best")
                ax.legend(loc="lower right")
    if target is not None:
        ax.axvline(target, color="grey", ls="--", lw=0.8)
    ax.set_xlabel("parameters")
    ax.set_ylabel("accuracy (delta1)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_score_vs_accuracy(scores, accuracies, path) -> None:
    """Training-free score against trained accuracy; degenerate scores are
    left out."""
    pairs = [(s, a) for s, a in zip(scores, accuracies) if math.isfinite(s)]
    fig, ax = plt.subplots(figsize=(5, 3.8))
    if pairs:
        s, a = map(np.array, zip(*pairs))
        ax.scatter(s, a, s=12, alpha=0.8)
        if len(pairs) > 2:
            rho = spearmanr(s, a).statistic
            ax.set_title(f"Spearman rho = {rho:.3f} (n = {len(pairs)})")
    ax.set_xlabel("score (log |K|)")
    ax.set_ylabel("accuracy (delta1)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
