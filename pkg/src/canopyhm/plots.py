"""Report figures rendered to self-contained SVG files.

Figures are outputs of the batch CLI, not an interactive surface, so the
Agg backend is forced before pyplot is imported.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalmetrics import Profile

_SPECIES_COLORS = {
    "pinus_tabulaeformis": "tab:green",
    "populus_tomentosa": "tab:blue",
    "other_broadleaf": "tab:orange",
}


def plot_profiles(pred: Profile, ref: Profile | None, out_path,
                  correlation: float | None = None) -> None:
    fig, ax = plt.subplots(figsize=(8, 3))
    idx = np.arange(len(pred.values))
    ax.plot(idx, pred.values, lw=1.0, label="prediction", color="tab:red")
    if ref is not None:
        ax.plot(np.arange(len(ref.values)), ref.values, lw=1.0,
                label="reference", color="tab:gray")
    title = f"{pred.axis} profile"
    if correlation is not None:
        title += f" (r = {correlation:.3f})"
    ax.set_title(title)
    ax.set_xlabel("column index" if pred.axis == "X" else "row index")
    ax.set_ylabel("mean height (m)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_training_curve(steps, losses, out_path, xlabel: str = "step",
                        title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(steps, losses, lw=1.0, color="tab:blue")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_agb_scatter(ref_values, pred_values, species, out_path,
                     title: str = "mean single-tree AGB per parcel") -> None:
    """Predicted vs reference per-parcel AGB, colored by species, 1:1 line."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ref_values = np.asarray(ref_values, dtype=float)
    pred_values = np.asarray(pred_values, dtype=float)
    for sp in sorted(set(species)):
        m = np.array([s == sp for s in species])
        ax.scatter(ref_values[m], pred_values[m], s=18,
                   color=_SPECIES_COLORS.get(sp, "tab:purple"), label=sp,
                   alpha=0.8, edgecolors="none")
    if ref_values.size:
        lim = max(ref_values.max(), pred_values.max()) * 1.05
        ax.plot([0, lim], [0, lim], color="k", lw=0.8, ls="--")
        ax.set_xlim(0, lim)
        ax.set_ylim(0, lim)
    ax.set_xlabel("reference AGB (kg)")
    ax.set_ylabel("predicted AGB (kg)")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_scatter_density(ref_values, pred_values, out_path,
                         title: str = "pixel-wise evaluation",
                         max_points: int = 50000, seed: int = 0) -> None:
    """Predicted vs reference heights on a pixel sample with a 1:1 line."""
    ref_values = np.asarray(ref_values, dtype=float).ravel()
    pred_values = np.asarray(pred_values, dtype=float).ravel()
    if ref_values.size > max_points:
        idx = np.random.default_rng(seed).choice(ref_values.size, max_points,
                                                 replace=False)
        ref_values, pred_values = ref_values[idx], pred_values[idx]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(ref_values, pred_values, s=2, alpha=0.15, color="tab:green",
               edgecolors="none")
    lim = max(ref_values.max(), pred_values.max(), 1.0) * 1.05
    ax.plot([0, lim], [0, lim], color="k", lw=0.8, ls="--")
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.set_xlabel("reference height (m)")
    ax.set_ylabel("predicted height (m)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
