"""Figure helpers for IoU histograms.

Figures are built on :class:`matplotlib.figure.Figure` directly, so nothing
here touches pyplot's global state and rendering works headless.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import numpy as np
from matplotlib import rc_context
from matplotlib.figure import Figure

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}
COLORS = ("#1f5aa6", "#d9822b")

# PNG metadata otherwise embeds the matplotlib version
_SAVE_META = {"Software": None}


def _bars(ax, edges, counts, color, label=None, alpha=1.0):
    edges = np.asarray(edges)
    ax.bar(
        edges[:-1],
        counts,
        width=np.diff(edges),
        align="edge",
        color=color,
        edgecolor="white",
        linewidth=0.5,
        alpha=alpha,
        label=label,
    )


def _decorate(ax, title):
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("IoU")
    ax.set_ylabel("Frequency")
    ax.set_title(title)


def histogram_figure(edges: Sequence[float], counts: Sequence[int], title: str) -> Figure:
    with rc_context(STYLE):
        fig = Figure(figsize=(5.0, 3.2), dpi=100)
        ax = fig.add_subplot(1, 1, 1)
        _bars(ax, edges, counts, COLORS[0])
        _decorate(ax, title)
        fig.tight_layout()
    return fig


def overlay_figure(
    edges: Sequence[float],
    counts_a: Sequence[int],
    counts_b: Sequence[int],
    labels: tuple[str, str],
    title: str = "IoU distribution",
) -> Figure:
    """Both histograms on one axis (same bins) plus a side-by-side pair below it."""
    ymax = max(max(counts_a, default=0), max(counts_b, default=0), 1) * 1.05
    with rc_context(STYLE):
        fig = Figure(figsize=(7.0, 6.0), dpi=100)
        top = fig.add_subplot(2, 1, 1)
        _bars(top, edges, counts_a, COLORS[0], labels[0], alpha=0.6)
        _bars(top, edges, counts_b, COLORS[1], labels[1], alpha=0.6)
        _decorate(top, title)
        top.legend(loc="upper left")
        for k, (counts, label) in enumerate(((counts_a, labels[0]), (counts_b, labels[1]))):
            ax = fig.add_subplot(2, 2, 3 + k)
            _bars(ax, edges, counts, COLORS[k])
            _decorate(ax, label)
            ax.set_ylim(0, ymax)
        fig.tight_layout()
    return fig


def save_figure(fig: Figure, path: Union[str, Path]) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=_SAVE_META)
    return path
