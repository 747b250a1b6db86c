"""Cluster validity indices and selection of the number of zones."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import SamplingError, SingleCluster
from .spectral import KernelConfig, _as_array, cluster_from_basis, spectral_basis

logger = logging.getLogger(__name__)


def _encode_labels(labels):
    _, inv = np.unique(np.asarray(labels), return_inverse=True)
    return inv.ravel()


def silhouette(points, labels, chunk: int = 1024) -> float:
    """Mean silhouette coefficient; singleton clusters score 0, and so does 0/0."""
    X = _as_array(points)
    if X.ndim == 1:
        X = X[:, None]
    lab = _encode_labels(labels)
    K = lab.max() + 1 if lab.size else 0
    if K < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    sizes = np.bincount(lab, minlength=K).astype(float)
    onehot = np.zeros((len(X), K))
    onehot[np.arange(len(X)), lab] = 1.0
    s = np.zeros(len(X))
    for start in range(0, len(X), chunk):
        sl = slice(start, start + chunk)
        sums = cdist(X[sl], X) @ onehot  # distance sums per cluster
        own = lab[sl]
        rows = np.arange(sums.shape[0])
        own_size = sizes[own]
        a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
        means = sums / sizes[None, :]
        means[rows, own] = np.inf
        b = means.min(axis=1)
        denom = np.maximum(a, b)
        with np.errstate(invalid="ignore", divide="ignore"):
            si = np.where(denom > 0, (b - a) / denom, 0.0)
        si[own_size <= 1] = 0.0
        s[sl] = si
    return float(s.mean())


def calinski_harabasz(points, labels) -> float:
    """Between/within dispersion ratio; ``inf`` when every cluster is a single point.

    When both dispersions vanish (all points identical) the index is 0. With
    ``K == n`` every cluster is a singleton, so the within dispersion is zero.
    """
    X = _as_array(points)
    if X.ndim == 1:
        X = X[:, None]
    lab = _encode_labels(labels)
    n = len(X)
    K = lab.max() + 1 if lab.size else 0
    if K < 2:
        raise SingleCluster("Calinski-Harabasz needs at least two clusters")
    mu = X.mean(axis=0)
    between = within = 0.0
    for k in range(K):
        Xk = X[lab == k]
        mk = Xk.mean(axis=0)
        between += len(Xk) * float(((mk - mu) ** 2).sum())
        within += float(((Xk - mk) ** 2).sum())
    if within == 0.0:
        return math.inf if between > 0 else 0.0
    return (between / (K - 1)) / (within / (n - K))


def _minmax(values):
    v = np.asarray(values, dtype=float)
    out = np.full(v.shape, np.nan)
    ok = ~np.isnan(v)
    finite = ok & np.isfinite(v)
    out[ok & np.isposinf(v)] = 1.0
    out[ok & np.isneginf(v)] = 0.0
    if finite.any():
        lo, hi = v[finite].min(), v[finite].max()
        out[finite] = 0.5 if hi == lo else (v[finite] - lo) / (hi - lo)
    return out


def composite_score(silhouettes, ch_scores):
    """Equal-weight mean of the two min-max normalized metric sequences.

    A constant metric normalizes to 0.5 everywhere; a ``+inf`` Calinski-Harabasz
    sentinel normalizes to 1. ``nan`` marks a K with no score.
    """
    s = _minmax(silhouettes)
    c = _minmax(ch_scores)
    return 0.5 * (s + c)


@dataclass(frozen=True)
class ValidityReport:
    k_values: tuple
    silhouette: tuple
    calinski_harabasz: tuple
    composite: tuple
    best_k: int
    failed: tuple = ()
    space: str = "embedding"

    def to_dict(self) -> dict:
        def enc(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return None
            return "inf" if v == math.inf else float(v)

        return {
            "k_values": list(self.k_values),
            "silhouette": [enc(v) for v in self.silhouette],
            "calinski_harabasz": [enc(v) for v in self.calinski_harabasz],
            "composite": [enc(v) for v in self.composite],
            "best_k": self.best_k,
            "failed": list(self.failed),
            "space": self.space,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["k", "silhouette", "ch", "composite"])
        for k, s, c, m in zip(self.k_values, self.silhouette,
                              self.calinski_harabasz, self.composite):
            w.writerow([k, *(("" if math.isnan(v) else repr(float(v))) for v in (s, c, m))])
        return buf.getvalue()


def best_k_from(k_values, composite) -> int:
    comp = np.asarray(composite, dtype=float)
    ok = ~np.isnan(comp)
    if not ok.any():
        raise SamplingError("no K could be scored")
    top = comp[ok].max()
    return int(min(k for k, c, g in zip(k_values, comp, ok) if g and c == top))


def select_k(features, k_range, config: KernelConfig = KernelConfig(), seed: int = 0,
             space: str = "embedding", threads: int = 1) -> ValidityReport:
    """Cluster at each K in ``k_range`` and pick the K with the best composite score.

    The graph and its eigendecomposition are computed once and sliced per K,
    so each K's labels equal those of ``cluster(features, K, config, seed)``.
    """
    if space not in ("embedding", "raw"):
        raise ValueError(f"unknown scoring space {space!r}")
    ks = sorted(set(int(k) for k in k_range))
    X = _as_array(features)
    if not ks or ks[0] < 2 or ks[-1] > len(X) - 1:
        raise ValueError(f"k_range must lie within [2, {len(X) - 1}]")
    basis = spectral_basis(features, config, seed)

    def evaluate(K):
        try:
            model = cluster_from_basis(features, basis, K, seed)
            if space == "embedding":
                pts = model.embedding.coords
                lab = model.labels if basis.subset is None else model.labels[basis.subset]
            else:
                pts, lab = X, model.labels
            return silhouette(pts, lab), calinski_harabasz(pts, lab)
        except (SamplingError, ValueError) as exc:
            logger.warning("K=%d failed: %s", K, exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(evaluate, ks))
    else:
        results = [evaluate(k) for k in ks]
    sil = [math.nan if r is None else r[0] for r in results]
    ch = [math.nan if r is None else r[1] for r in results]
    comp = composite_score(sil, ch)
    failed = tuple(k for k, r in zip(ks, results) if r is None)
    return ValidityReport(
        k_values=tuple(ks), silhouette=tuple(sil), calinski_harabasz=tuple(ch),
        composite=tuple(float(c) for c in comp), best_k=best_k_from(ks, comp),
        failed=failed, space=space,
    )
