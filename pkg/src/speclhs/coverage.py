"""Coverage diagnostics for sampling designs, with SVG plots.

The SVG writers build the markup by hand so that the output is byte-stable
and easy to inspect in tests.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

from .clhs import quantile_strata, stratum_of
from .errors import FileWriteError, MismatchedContext
from .ingest import FeatureMatrix

# tab10
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def cluster_color(k: int) -> str:
    return PALETTE[int(k) % len(PALETTE)]


@dataclass(frozen=True)
class PCAProjection:
    components: np.ndarray  # (D, d) orthonormal loadings
    scores: np.ndarray  # (N, d)
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    degenerate: bool = False


def pca(features, d: int = 2) -> PCAProjection:
    """Principal components from the covariance eigendecomposition.

    Each component is signed so its largest-magnitude loading is positive. If
    the data have rank below ``d`` only the non-degenerate components are
    returned and ``degenerate`` is set.
    """
    X = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=float)
    N, D = X.shape
    if N < 2:
        raise ValueError("PCA needs at least two rows")
    if not 1 <= d <= D:
        raise ValueError(f"d must be in [1, {D}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    vals, vecs = np.linalg.eigh(Xc.T @ Xc / (N - 1))
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    total = vals.sum()
    rank = int(np.sum(vals > 1e-12 * max(vals[0], np.finfo(float).tiny)))
    k = min(d, rank)
    V = vecs[:, :k]
    pivot = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[pivot, np.arange(k)])
    V = V * np.where(signs == 0, 1.0, signs)
    ratio = vals[:k] / total if total > 0 else np.zeros(k)
    return PCAProjection(V, Xc @ V, ratio, mean, degenerate=k < d)


@dataclass(frozen=True)
class CoverageSummary:
    per_cluster_counts: tuple
    clusters_covered_fraction: float
    per_covariate_stratum_occupancy: tuple
    covariate_names: tuple
    design_tag: str
    n: int

    @property
    def K(self) -> int:
        return len(self.per_cluster_counts)

    def to_dict(self) -> dict:
        return {
            "design": self.design_tag,
            "n": self.n,
            "K": self.K,
            "per_cluster_counts": {str(k): int(c) for k, c in enumerate(self.per_cluster_counts)},
            "clusters_covered_fraction": self.clusters_covered_fraction,
            # not a published metric: share of the n global quantile strata hit per covariate
            "per_covariate_stratum_occupancy": {
                name: occ for name, occ in zip(self.covariate_names,
                                               self.per_covariate_stratum_occupancy)
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def summarize(indices, labels, features, K: Optional[int] = None,
              design_tag: str = "spectral") -> CoverageSummary:
    """Per-cluster counts, cluster coverage and per-covariate stratum occupancy."""
    idx = np.asarray(indices, dtype=np.int64)
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    if K is None:
        K = int(labels.max()) + 1
    X = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=float)
    names = (features.covariate_names if isinstance(features, FeatureMatrix)
             else tuple(f"x{j}" for j in range(X.shape[1])))
    counts = np.bincount(labels[idx], minlength=K) if len(idx) else np.zeros(K, dtype=np.int64)
    n = len(idx)
    if n:
        edges = quantile_strata(X, n)
        occ = tuple(
            float(len(np.unique(stratum_of(X[idx, j], edges[j])))) / n
            for j in range(X.shape[1])
        )
    else:
        occ = tuple(0.0 for _ in range(X.shape[1]))
    return CoverageSummary(
        per_cluster_counts=tuple(int(c) for c in counts),
        clusters_covered_fraction=float(np.count_nonzero(counts) / K),
        per_covariate_stratum_occupancy=occ,
        covariate_names=tuple(names),
        design_tag=design_tag,
        n=n,
    )


@dataclass(frozen=True)
class ComparisonTable:
    first: str
    second: str
    rows: tuple  # (metric, first value, second value, second - first)

    def delta(self, metric: str) -> float:
        for m, _, _, d in self.rows:
            if m == metric:
                return d
        raise KeyError(metric)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["metric", self.first, self.second, "delta"])
        for m, a, b, d in self.rows:
            w.writerow([m, _fmt(a), _fmt(b), _fmt(d)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "columns": ["metric", self.first, self.second, "delta"],
            "rows": [[m, a, b, d] for m, a, b, d in self.rows],
        }


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def compare(first: CoverageSummary, second: CoverageSummary) -> ComparisonTable:
    """Side-by-side table; ``delta`` is second minus first."""
    if first.K != second.K or first.n != second.n:
        raise MismatchedContext(
            f"cannot compare K={first.K}, n={first.n} with K={second.K}, n={second.n}")
    rows = []
    for k, (a, b) in enumerate(zip(first.per_cluster_counts, second.per_cluster_counts)):
        rows.append((f"cluster_{k}", int(a), int(b), int(b) - int(a)))
    a, b = first.clusters_covered_fraction, second.clusters_covered_fraction
    rows.append(("clusters_covered_fraction", a, b, b - a))
    for name, a, b in zip(first.covariate_names, first.per_covariate_stratum_occupancy,
                          second.per_covariate_stratum_occupancy):
        rows.append((f"stratum_occupancy:{name}", a, b, b - a))
    return ComparisonTable(first.design_tag, second.design_tag, tuple(rows))


# --------------------------------------------------------------------------
# SVG output


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise FileWriteError(f"{path}: {exc}") from exc


def _svg_open(width, height, title):
    return [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f"<title>{escape(title)}</title>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]


def _legend(ids, x, y):
    out = ['<g id="legend" font-family="sans-serif" font-size="11">']
    for i, k in enumerate(ids):
        yy = y + 16 * i
        out.append(f'<circle cx="{x}" cy="{yy}" r="5" fill="{cluster_color(k)}" stroke="#000000"/>')
        out.append(f'<text x="{x + 10}" y="{yy + 4}">cluster {int(k)}</text>')
    out.append("</g>")
    return out


def emit_scatter(projection: PCAProjection, labels, indices, path,
                 title: str = "Samples in principal-component space") -> None:
    """All cells as grey dots, selected cells as circles coloured by cluster."""
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    idx = np.asarray(indices, dtype=np.int64)
    S = projection.scores
    xs = S[:, 0] if S.shape[1] else np.zeros(len(labels))
    ys = S[:, 1] if S.shape[1] > 1 else np.zeros(len(xs))
    W, H, m, legend_w = 640, 480, 50, 110
    pw, ph = W - 2 * m - legend_w, H - 2 * m

    def scale(v, lo, hi, size):
        return size / 2 if hi == lo else (v - lo) / (hi - lo) * size

    x0, x1 = (xs.min(), xs.max()) if len(xs) else (0.0, 1.0)
    y0, y1 = (ys.min(), ys.max()) if len(ys) else (0.0, 1.0)
    px = m + np.array([scale(v, x0, x1, pw) for v in xs])
    py = H - m - np.array([scale(v, y0, y1, ph) for v in ys])
    ratio = list(projection.explained_variance_ratio) + [0.0, 0.0]
    out = _svg_open(W, H, title)
    out.append(f'<g id="axes" stroke="#000000" fill="none">'
               f'<line x1="{m}" y1="{H - m}" x2="{m + pw}" y2="{H - m}"/>'
               f'<line x1="{m}" y1="{H - m}" x2="{m}" y2="{m}"/></g>')
    out.append(f'<g font-family="sans-serif" font-size="12">'
               f'<text x="{m + pw / 2:.1f}" y="{H - 15}" text-anchor="middle">'
               f'PC1 ({100 * ratio[0]:.1f}%)</text>'
               f'<text x="15" y="{m + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {m + ph / 2:.1f})">PC2 ({100 * ratio[1]:.1f}%)</text></g>')
    out.append('<g id="cells" fill="#b0b0b0">')
    out.extend(f'<circle class="cell" cx="{x:.2f}" cy="{y:.2f}" r="1.5"/>' for x, y in zip(px, py))
    out.append("</g>")
    out.append('<g id="samples" stroke="#000000" stroke-width="0.8">')
    for i in idx:
        k = labels[i]
        out.append(f'<circle class="sample cluster-{k}" cx="{px[i]:.2f}" cy="{py[i]:.2f}" '
                   f'r="5" fill="{cluster_color(k)}"/>')
    out.append("</g>")
    out.extend(_legend(sorted(set(int(labels[i]) for i in idx)), W - legend_w + 15, m))
    out.append("</svg>")
    _write(path, "\n".join(out) + "\n")


def cell_pixel_size(width: int, height: int, target: int = 600) -> int:
    return max(1, min(target // max(width, 1), target // max(height, 1)))


def emit_cluster_map(labels, features: FeatureMatrix, indices, path,
                     title: str = "Zones and selected samples") -> None:
    """Zones as coloured grid cells, selected cells as red x markers."""
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    idx = np.asarray(indices, dtype=np.int64)
    g = features.grid
    c = cell_pixel_size(g.width, g.height)
    m, legend_w = 20, 110
    W, H = 2 * m + g.width * c + legend_w, 2 * m + g.height * c
    out = _svg_open(W, H, title)
    out.append('<g id="zones" shape-rendering="crispEdges">')
    for (r, col), k in zip(features.cell_index, labels):
        out.append(f'<rect class="zone cluster-{k}" x="{m + col * c}" y="{m + r * c}" '
                   f'width="{c}" height="{c}" fill="{cluster_color(k)}"/>')
    out.append("</g>")
    arm = max(2.0, 0.4 * c)
    out.append(f'<g id="samples" stroke="#e00000" stroke-width="{max(1.0, c / 6):.2f}" fill="none">')
    for i in idx:
        r, col = features.cell_index[i]
        cx, cy = m + (col + 0.5) * c, m + (r + 0.5) * c
        out.append(f'<path class="sample cluster-{labels[i]}" transform="translate({cx:.2f},{cy:.2f})" '
                   f'd="M{-arm:.2f},{-arm:.2f}L{arm:.2f},{arm:.2f}M{-arm:.2f},{arm:.2f}L{arm:.2f},{-arm:.2f}"/>')
    out.append("</g>")
    out.extend(_legend(sorted(set(labels.tolist())), W - legend_w + 15, m + 5))
    out.append("</svg>")
    _write(path, "\n".join(out) + "\n")
