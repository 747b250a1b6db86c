"""Matplotlib figures written next to the tabular report outputs.

Figures are drawn on bare :class:`~matplotlib.figure.Figure` objects (no
pyplot state) and saved without a Software/date stamp, so reruns produce
identical bytes.
"""

from __future__ import annotations

import functools
import math

import matplotlib as mpl
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.colors import ListedColormap
from matplotlib.figure import Figure

from .coverage import PALETTE, cluster_color

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
DPI = 120


def _styled(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        with mpl.rc_context(RC):
            return func(*args, **kwargs)
    return wrapper


def _figure(width, height):
    fig = Figure(figsize=(width, height), dpi=DPI)
    FigureCanvasAgg(fig)
    return fig


def _save(fig, path):
    fig.savefig(path, format="png", metadata={"Software": None})


@_styled
def validity_curves(report, path):
    """Silhouette, Calinski-Harabasz and composite score against K."""
    fig = _figure(10, 3)
    ks = np.asarray(report.k_values)
    ch = np.asarray(report.calinski_harabasz, dtype=float)
    finite = np.where(np.isfinite(ch), ch, np.nan)
    panels = (
        ("Mean silhouette", np.asarray(report.silhouette, dtype=float), "tab:blue"),
        ("Calinski-Harabasz", finite, "tab:green"),
        ("Composite (normalized)", np.asarray(report.composite, dtype=float), "tab:red"),
    )
    for i, (title, y, color) in enumerate(panels):
        ax = fig.add_subplot(1, 3, i + 1)
        ax.plot(ks, y, "o-", color=color, ms=3)
        ax.axvline(report.best_k, color="0.6", ls="--", lw=0.8)
        ax.set_title(title)
        ax.set_xlabel("K")
        if i == 1 and np.isinf(ch).any():
            top = np.nanmax(finite) if np.isfinite(finite).any() else 1.0
            for k in ks[np.isinf(ch)]:
                ax.annotate("inf", (k, top), ha="center", fontsize=7)
    fig.tight_layout()
    _save(fig, path)


@_styled
def cluster_sizes(labels, K, path):
    fig = _figure(5, 3.2)
    ax = fig.add_subplot(111)
    sizes = np.bincount(np.asarray(labels), minlength=K)
    ax.bar(np.arange(K), sizes, color=[cluster_color(k) for k in range(K)])
    ax.set_xticks(np.arange(K))
    ax.set_xlabel("Cluster ID")
    ax.set_ylabel("Cells")
    ax.set_title(f"Cells per cluster (K = {K})")
    fig.tight_layout()
    _save(fig, path)


@_styled
def pca_scatter(projection, labels, indices, path):
    fig = _figure(5, 4.2)
    ax = fig.add_subplot(111)
    S = projection.scores
    y = S[:, 1] if S.shape[1] > 1 else np.zeros(len(S))
    ax.scatter(S[:, 0], y, s=2, c="0.75", lw=0, rasterized=True)
    idx = np.asarray(indices, dtype=int)
    labels = np.asarray(labels)
    for k in sorted(set(labels[idx].tolist())):
        sel = idx[labels[idx] == k]
        ax.scatter(S[sel, 0], y[sel], s=40, color=cluster_color(k),
                   edgecolors="k", lw=0.6, label=f"cluster {k}")
    r = list(projection.explained_variance_ratio) + [0.0, 0.0]
    ax.set_xlabel(f"PC1 ({100 * r[0]:.1f}%)")
    ax.set_ylabel(f"PC2 ({100 * r[1]:.1f}%)")
    if len(idx):
        ax.legend(loc="best", ncol=2, frameon=False)
    fig.tight_layout()
    _save(fig, path)


@_styled
def sample_maps(features, labels, designs: dict, path):
    """One zone map per design with the selected cells marked by red crosses."""
    g = features.grid
    img = np.full((g.height, g.width), np.nan)
    labels = np.asarray(labels)
    img[features.cell_index[:, 0], features.cell_index[:, 1]] = labels
    K = int(labels.max()) + 1
    cmap = ListedColormap([PALETTE[k % len(PALETTE)] for k in range(K)])
    n = len(designs)
    fig = _figure(4.2 * n, 4.0)
    for i, (name, idx) in enumerate(designs.items()):
        ax = fig.add_subplot(1, n, i + 1)
        ax.imshow(img, cmap=cmap, vmin=-0.5, vmax=K - 0.5, interpolation="nearest")
        rc = features.cell_index[np.asarray(idx, dtype=int)]
        ax.scatter(rc[:, 1], rc[:, 0], marker="x", c="red", s=30, lw=1.2)
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)


@_styled
def covariate_coverage(features, indices, column, path):
    """Sorted covariate values in grey with the selected cells marked."""
    fig = _figure(5, 3.2)
    ax = fig.add_subplot(111)
    v = features.values[:, column]
    order = np.argsort(v, kind="stable")
    q = np.empty(len(v))
    q[order] = (np.arange(len(v)) + 0.5) / len(v)
    ax.scatter(q, v, s=2, c="0.7", lw=0, rasterized=True)
    idx = np.asarray(indices, dtype=int)
    ax.scatter(q[idx], v[idx], marker="x", c="red", s=30, lw=1.2)
    ax.set_xlabel("Population quantile")
    ax.set_ylabel(features.covariate_names[column])
    n = max(len(idx), 1)
    for j in range(1, n):
        ax.axvline(j / n, color="0.9", lw=0.5, zorder=0)
    ax.set_xlim(0, 1)
    ax.set_title(f"Coverage of {features.covariate_names[column]}")
    fig.tight_layout()
    _save(fig, path)


@_styled
def trace_plot(traces: dict, path):
    fig = _figure(5, 3.2)
    ax = fig.add_subplot(111)
    for name, tr in traces.items():
        ax.plot(tr[:, 0], tr[:, 3], lw=1, label=str(name))
    ax.set_xlabel("Move")
    ax.set_ylabel("Best objective")
    ax.set_yscale("symlog", linthresh=1e-2)
    if len(traces) <= 12:
        ax.legend(frameon=False, ncol=math.ceil(len(traces) / 6))
    fig.tight_layout()
    _save(fig, path)
