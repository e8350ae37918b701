"""Figures for evaluation and diagnostic reports, rendered straight to files.

Figures are built on the Agg canvas without touching pyplot state, and PNG
metadata is stripped so re-rendering the same data gives the same bytes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .stick_breaking import category_probabilities, mode_thresholds

STYLE = {"figsize": (6.0, 4.0), "dpi": 120}


def _figure(ncols: int = 1, width: float | None = None):
    w, h = STYLE["figsize"]
    fig = Figure(figsize=(width or w * ncols, h), dpi=STYLE["dpi"])
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, ncols)
    return fig, axes


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    return path


def category_curves(c, low: float | None = None, high: float | None = None, num: int = 201):
    """Grid of latent responses and the K category probabilities along it."""
    c = np.asarray(c, dtype=float)
    pad = 4.0 if c.size < 2 else float(c[-1] - c[0]) / 2
    low = float(c[0] - pad) if low is None else low
    high = float(c[-1] + pad) if high is None else high
    grid = np.linspace(low, high, num)
    return grid, category_probabilities(grid, c)


def plot_category_curves(c, path, title: str = "Category probabilities") -> Path:
    grid, probs = category_curves(c)
    fig, ax = _figure()
    for k in range(probs.shape[1]):
        ax.plot(grid, probs[:, k], label=f"level {k + 1}")
    for x in np.asarray(c):
        ax.axvline(x, color="0.6", lw=0.8, ls=":")
    if np.size(c) > 1:
        for t in mode_thresholds(c)[:-1]:
            ax.axvline(t, color="0.3", lw=0.8, ls="--")
    ax.set_xlabel("latent response")
    ax.set_ylabel("probability")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def plot_group_bias(group_biases, aspect_names, path) -> Path:
    """Grouped bars: one cluster per aspect, one bar per user group."""
    A = len(aspect_names)
    groups = [g for g in group_biases if g.size > 0] or list(group_biases)
    fig, ax = _figure(width=max(6.0, 1.2 * A + 2))
    width = 0.8 / max(len(groups), 1)
    x = np.arange(A)
    for n, g in enumerate(groups):
        ax.bar(x + (n - (len(groups) - 1) / 2) * width, g.bias, width, label=f"group {g.group} (n={g.size})")
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(aspect_names)
    ax.set_ylabel("mean bias offset")
    ax.legend(fontsize=7, frameon=False, ncol=2)
    return _save(fig, path)


def plot_group_sd(points, path) -> Path:
    """Control-group sd against within-group sd, with the diagonal."""
    fig, ax = _figure(width=4.5)
    if points:
        g = np.array([p.group_sd for p in points])
        ctrl = np.array([p.control_sd for p in points])
        ax.scatter(g, ctrl, s=8, alpha=0.5)
        top = float(max(g.max(), ctrl.max(), 1e-9)) * 1.05
    else:
        top = 1.0
    ax.plot([0, top], [0, top], color="k", lw=0.8)
    ax.set_xlim(0, top)
    ax.set_ylim(0, top)
    ax.set_xlabel("sd within user group")
    ax.set_ylabel("sd over all raters")
    return _save(fig, path)


def plot_delta_bins(deltas, path) -> Path:
    """Mean observed difference per bin of intrinsic-quality and average-rating differences."""
    fig, axes = _figure(ncols=2)
    panels = ((axes[0], deltas.bins_int, "intrinsic quality difference", deltas.pearson_int),
              (axes[1], deltas.bins_avg, "average rating difference", deltas.pearson_avg))
    for ax, bins, label, r in panels:
        ok = bins.counts > 0
        ax.plot(bins.centers[ok], bins.mean_obs[ok], marker="o")
        lim = float(bins.centers.max()) + 0.5
        ax.plot([-lim, lim], [-lim, lim], color="0.6", lw=0.8, ls=":")
        ax.set_xlabel(label)
        ax.set_ylabel("mean observed difference")
        ax.set_title(f"r = {r:.3f}", fontsize=9)
    return _save(fig, path)


def plot_trace(log_density, path, burn_in: int | None = None) -> Path:
    fig, ax = _figure()
    ax.plot(np.arange(1, len(log_density) + 1), log_density, lw=0.8)
    if burn_in:
        ax.axvline(burn_in, color="0.5", ls="--", lw=0.8)
    ax.set_xlabel("sweep")
    ax.set_ylabel("joint log-density")
    return _save(fig, path)
