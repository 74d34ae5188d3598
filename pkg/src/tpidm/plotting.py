"""Figures written next to the CSV outputs (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_pca(reference: np.ndarray, generated: np.ndarray, ratios: Sequence[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(reference[:, 0], reference[:, 1], s=6, alpha=0.5, label="original")
    ax.scatter(generated[:, 0], generated[:, 1], s=6, alpha=0.5, label="generated")
    ax.set_xlabel(f"PC1 ({100 * ratios[0]:.1f}%)")
    ax.set_ylabel(f"PC2 ({100 * ratios[1]:.1f}%)")
    ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, path)


def plot_scores(scores: np.ndarray, truth: np.ndarray, threshold: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    idx = np.arange(scores.size)
    ax.scatter(idx[~truth], scores[~truth], s=5, label="normal")
    ax.scatter(idx[truth], scores[truth], s=5, label="anomalous")
    ax.axhline(threshold, color="k", lw=1, ls="--", label="threshold")
    ax.set_xlabel("window")
    ax.set_ylabel("score")
    ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, path)


def plot_training(rows: Sequence[tuple[int, float, float, float]], path) -> Path:
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(rows[:, 0], rows[:, 1], label="l_dm")
    if np.any(rows[:, 2] > 0):
        ax.plot(rows[:, 0], rows[:, 2], label="l_pi")
        ax.plot(rows[:, 0], rows[:, 3], label="total")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, path)
