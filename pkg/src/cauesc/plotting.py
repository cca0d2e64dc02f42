"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .corpus import STRATEGIES  # noqa: E402

# Fixed metadata keeps the bytes of repeated renders identical.
_PNG_META = {"Software": None}
_SHORT = ["Que", "Res", "Ref", "Sel", "Aff", "Sug", "Inf", "Oth"]


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curve(steps: Sequence[int], l_s: Sequence[float], l_r: Sequence[float],
                    path: str | Path, dev: Sequence[tuple[int, float]] = ()) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    total = np.asarray(l_s) + np.asarray(l_r)
    ax.plot(steps, total, label="L")
    ax.plot(steps, l_s, label="L_s")
    ax.plot(steps, l_r, label="L_r")
    if dev:
        ax.plot([d[0] for d in dev], [d[1] for d in dev], "o-", label="dev L")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_distribution(dist: np.ndarray, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(_SHORT[:len(dist)], dist)
    ax.set_ylabel("share of supporter turns")
    ax.set_ylim(0, max(0.4, float(np.max(dist)) * 1.1 if len(dist) else 0.4))
    fig.tight_layout()
    _save(fig, path)


def plot_progress(progress: np.ndarray, path: str | Path) -> None:
    """Stacked shares of each strategy per conversation-progress interval."""
    fig, ax = plt.subplots(figsize=(7, 4))
    n = progress.shape[0]
    x = np.arange(n)
    bottom = np.zeros(n)
    for j in range(progress.shape[1]):
        ax.bar(x, progress[:, j], bottom=bottom, label=STRATEGIES[j].name)
        bottom += progress[:, j]
    ax.set_xticks(x, [f"{i}/{n}-{i + 1}/{n}" for i in range(n)], fontsize=7)
    ax.set_xlabel("conversation progress")
    ax.set_ylabel("share")
    ax.legend(fontsize=6, loc="upper left", bbox_to_anchor=(1.0, 1.0))
    fig.tight_layout()
    _save(fig, path)


def plot_confusion(matrix: np.ndarray, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(matrix, cmap="Blues")
    n = matrix.shape[0]
    ax.set_xticks(range(n), _SHORT[:n])
    ax.set_yticks(range(n), _SHORT[:n])
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(int(matrix[i, j])), ha="center", va="center", fontsize=7)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, path)
