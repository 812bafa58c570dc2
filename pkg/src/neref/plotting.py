"""Figures written straight to files (Agg canvas, no pyplot state)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import rc_context
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

GOLDEN = (np.sqrt(5) - 1.0) / 2.0
WIDTH = 6.0

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, metadata={"Software": None})
    return path


def plot_loss(history, path) -> Path:
    """Per-iteration correspondence, smoothness and total loss on a log axis."""
    h = np.asarray(history, dtype=np.float64).reshape(-1, 6)
    with rc_context(STYLE):
        fig = Figure(figsize=(WIDTH, WIDTH * GOLDEN * 0.8))
        ax = fig.add_subplot(1, 1, 1)
        if len(h):
            ax.semilogy(h[:, 0], h[:, 1], label="correspondence")
            ax.semilogy(h[:, 0], h[:, 2], label="depth smoothness")
            ax.semilogy(h[:, 0], h[:, 3], "k", label="total")
            ax.legend(frameon=False)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        fig.tight_layout()
        return _save(fig, path)


def plot_error_maps(depth_error, normal_error, mask, path) -> Path:
    """Side-by-side relative depth error and normal angle error (degrees)."""
    m = np.asarray(mask, bool)
    with rc_context(STYLE):
        fig = Figure(figsize=(WIDTH, WIDTH * 0.42))
        for k, (data, title, unit) in enumerate(
                [(depth_error, "relative depth error", ""), (normal_error, "normal angle error", "deg")]):
            ax = fig.add_subplot(1, 2, k + 1)
            img = np.where(m, data, np.nan)
            im = ax.imshow(img, cmap="magma", interpolation="nearest")
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
            cb = fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
            if unit:
                cb.set_label(unit)
        fig.tight_layout()
        return _save(fig, path)


def plot_render_comparison(rendered, reference, path) -> Path:
    """Rendered view, reference view and their absolute difference."""
    a = np.clip(np.asarray(rendered, dtype=np.float64), 0, 1)
    b = np.clip(np.asarray(reference, dtype=np.float64), 0, 1)
    with rc_context(STYLE):
        fig = Figure(figsize=(WIDTH, WIDTH * 0.36))
        panels = [(a, "field render"), (b, "reference"), (np.abs(a - b).mean(axis=-1), "|difference|")]
        for k, (img, title) in enumerate(panels):
            ax = fig.add_subplot(1, 3, k + 1)
            if img.ndim == 2:
                ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            else:
                ax.imshow(img, interpolation="nearest")
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        return _save(fig, path)


def plot_sweep(rows: list[dict], path, xlabel: str) -> Path:
    """Depth inaccuracy and normal error against the swept value, mean and spread over seeds."""
    values = sorted({r["value"] for r in rows})
    with rc_context(STYLE):
        fig = Figure(figsize=(WIDTH, WIDTH * GOLDEN * 0.7))
        for k, (key, label) in enumerate([("depth_relative_error", "depth error / truth"),
                                          ("normal_angle_mean", "normal error (deg)")]):
            ax = fig.add_subplot(1, 2, k + 1)
            per = [np.array([r[key] for r in rows if r["value"] == v], dtype=np.float64) for v in values]
            mean = np.array([p.mean() for p in per])
            spread = np.array([p.std() for p in per])
            ax.errorbar(values, mean, yerr=spread, fmt="o-", capsize=3)
            for v, p in zip(values, per):
                ax.plot([v] * len(p), p, ".", color="0.6")
            ax.set_xlabel(xlabel)
            ax.set_ylabel(label)
        fig.tight_layout()
        return _save(fig, path)
