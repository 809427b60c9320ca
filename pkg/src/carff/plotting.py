"""Matplotlib figures written straight to files (no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_curves(curves, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(curves.n, curves.accuracy, label="accuracy")
    ax.plot(curves.n, curves.recall, label="recall")
    ax.set_xlabel("samples n")
    ax.set_ylim(-0.02, 1.05)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_psnr_table(report, path):
    labels = [f"{s}_{t}" for s, t in report.states]
    fig, ax = plt.subplots(figsize=(1 + 0.6 * len(labels), 1 + 0.5 * len(labels)))
    im = ax.imshow(report.matrix, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels, rotation=90)
    ax.set_yticks(range(len(labels)), [f"{k[0]}:{lab}" for k, lab in zip(report.row_kind, labels)])
    ax.set_xlabel("ground-truth state")
    ax.set_ylabel("rendered belief")
    for r in range(len(labels)):
        for c in range(len(labels)):
            weight = "bold" if report.matches[r, c] else "normal"
            ax.text(c, r, f"{report.matrix[r, c]:.1f}", ha="center", va="center", fontsize=6,
                    color="w", weight=weight)
    fig.colorbar(im, ax=ax, label="PSNR (dB)")
    fig.tight_layout()
    return _save(fig, path)


def plot_history(history, keys, path, title=None):
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3))
    axes = np.atleast_1d(axes)
    epochs = [row["epoch"] for row in history]
    for ax, key in zip(axes, keys):
        ax.plot(epochs, [row[key] for row in history])
        ax.set_xlabel("epoch")
        ax.set_title(key)
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_trials(results, path):
    labels = [f"{r.controller}/n={r.n}\n{r.cell}" for r in results]
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(results)), 3.5))
    ax.bar(range(len(results)), [r.successes / r.trials for r in results])
    ax.set_xticks(range(len(results)), labels, rotation=90, fontsize=6)
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    return _save(fig, path)
