"""Figures written next to the CSV outputs (PNG, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {"figure.dpi": 100, "font.size": 9, "axes.grid": True, "grid.alpha": 0.3,
         "axes.spines.top": False, "axes.spines.right": False, "savefig.bbox": "tight"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_curves(curves: dict, path, ylabel: str = "loss", xlabel: str = "iteration", logy: bool = True,
                title: str | None = None) -> Path:
    """``curves`` maps a label to (x, y) sequences."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for label, (x, y) in curves.items():
            ax.plot(x, y, lw=1.2, label=label)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(curves) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_loss_rows(rows, path, title: str | None = None) -> Path:
    """Training loss figure for ``LossRow`` records."""
    it = [r.iteration for r in rows]
    curves = {"total": (it, [r.total for r in rows]), "photometric": (it, [r.photometric for r in rows])}
    if any(r.perceptual for r in rows):
        curves["perceptual"] = (it, [r.perceptual for r in rows])
    return plot_curves(curves, path, title=title)


def plot_metric_bars(values: dict, path, ylabel: str) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.5 * len(values) + 1.5), 3.0))
        ax.bar(range(len(values)), list(values.values()), color="0.35", width=0.6)
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(list(values), rotation=45, ha="right")
        ax.set_ylabel(ylabel)
        return _save(fig, path)
