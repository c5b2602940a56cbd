"""Matplotlib figures written next to the tabular report outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 9,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "figure.figsize": (4.8, 3.2),
}


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_sweep(xs: Sequence[float], ys: Sequence[float], path, *, xlabel: str, ylabel: str = "eval loss",
               title: str | None = None, baseline: float | None = None) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.plot(xs, ys, marker="o", color="C0")
        if baseline is not None:
            ax.axhline(baseline, color="0.5", ls="--", lw=1, label="baseline")
            ax.legend(frameon=False)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return _finish(fig, path)


def plot_bars(labels: Sequence[str], values: Sequence[float], path, *, ylabel: str, title: str | None = None) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(4.8, 0.9 * len(labels)), 3.2))
        ax.bar(range(len(labels)), values, color="C0")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        lo = min(values) if values else 0.0
        hi = max(values) if values else 1.0
        pad = 0.1 * (hi - lo) if hi > lo else 0.05 * abs(hi) + 1e-3
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return _finish(fig, path)


def plot_training(metrics: Sequence[dict], path) -> Path:
    steps = [m["step"] for m in metrics]
    with plt.rc_context(RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        ax1.plot(steps, [m["lm_loss"] for m in metrics], color="C0")
        ax1.set_xlabel("step")
        ax1.set_ylabel("LM loss")
        ax2.plot(steps, [m["load_cv"] for m in metrics], color="C1")
        ax2.set_xlabel("step")
        ax2.set_ylabel("load CV")
        return _finish(fig, path)
