"""Matplotlib figures written next to the delimited experiment outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .report import TABLE_COLUMNS, TABLE_COLUMN_TITLES

# strip software/date chunks so figure bytes are reproducible across runs
_PNG_META = {"Software": None}

_COLORS = {
    "single_color": "#d95f02",
    "rhythm_color": "#a61c00",
    "single_gray": "#7f7f7f",
    "rhythm_gray": "#3f3f3f",
}


def save_loss_curves(curves: dict, path, title: str = "Training loss"):
    """One line per (representation, fold) loss curve.

    curves maps a label like 'rhythm_color/fold0' to a list of per-episode
    losses.
    """
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for label in sorted(curves):
        rep = label.split("/")[0]
        ax.plot(curves[label], linewidth=0.8, alpha=0.7,
                color=_COLORS.get(rep, "#1f77b4"))
    # one legend entry per representation, not per fold
    seen = sorted({label.split("/")[0] for label in curves})
    for rep in seen:
        ax.plot([], [], color=_COLORS.get(rep, "#1f77b4"),
                label=TABLE_COLUMN_TITLES.get(rep, rep))
    ax.set_xlabel("training episode")
    ax.set_ylabel("episode loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=100, metadata=_PNG_META)
    plt.close(fig)


def save_metric_bars(cells: dict, mode: str, path):
    """Grouped bars of fold-averaged metrics per representation."""
    metrics = ["accuracy", "sensitivity", "specificity", "precision", "f1"]
    fig, ax = plt.subplots(figsize=(9, 4.5))
    n_groups = len(metrics)
    n_bars = len(TABLE_COLUMNS)
    width = 0.8 / n_bars
    for j, rep in enumerate(TABLE_COLUMNS):
        averaged = cells[rep].fold_averaged()
        vals = [100.0 * (averaged.get(m) or 0.0) for m in metrics]
        xs = [i + j * width for i in range(n_groups)]
        ax.bar(xs, vals, width=width, color=_COLORS[rep],
               label=TABLE_COLUMN_TITLES[rep])
    ax.set_xticks([i + 0.4 - width / 2 for i in range(n_groups)])
    ax.set_xticklabels([m.capitalize() for m in metrics])
    ax.set_ylabel("fold-averaged value (%)")
    ax.set_ylim(0, 105)
    ax.set_title(f"{mode} learning results")
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=100, metadata=_PNG_META)
    plt.close(fig)
