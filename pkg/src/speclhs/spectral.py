"""Spectral clustering of feature vectors into sampling zones.

Pipeline: kNN graph with RBF weights -> symmetric normalized Laplacian ->
eigenvectors of the ``K`` smallest eigenvalues, rows rescaled to unit length
(Ng, Jordan & Weiss) -> k-means++ on the embedding.  Large inputs are
clustered on a uniform subset and the remaining cells inherit the label of
their nearest subset cell.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import (
    ClusteringError,
    DegenerateGeometryWarning,
    EigenFailure,
    IsolatedNode,
)
from .ingest import FeatureMatrix, write_geotiff

_TINY = np.finfo(float).tiny


def _as_array(features) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        return features.values
    return np.asarray(features, dtype=float)


@dataclass(frozen=True)
class KernelConfig:
    """Graph construction settings.

    ``gamma=None`` selects the median heuristic ``1 / (2 sigma^2)`` where sigma
    is the median kNN distance over a probe sample.
    """

    gamma: Optional[float] = None
    knn: int = 10
    subset_size: int = 2000
    dense_threshold: int = 3000
    probe_size: int = 1000

    def __post_init__(self):
        if self.gamma is not None and not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError("gamma must be finite and positive")
        if self.knn < 1:
            raise ValueError("knn must be at least 1")
        if self.subset_size < 2:
            raise ValueError("subset_size must be at least 2")

    @classmethod
    def from_dict(cls, d: dict) -> "KernelConfig":
        d = dict(d)
        if d.get("gamma") in ("auto", None):
            d["gamma"] = None
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "gamma": "auto" if self.gamma is None else self.gamma,
            "knn": self.knn,
            "subset_size": self.subset_size,
            "dense_threshold": self.dense_threshold,
            "probe_size": self.probe_size,
        }


@dataclass(frozen=True)
class SimilarityGraph:
    weights: sparse.csr_matrix  # symmetric, zero diagonal
    gamma: float
    warnings: tuple = ()

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @property
    def degree(self) -> np.ndarray:
        return np.asarray(self.weights.sum(axis=1)).ravel()

    def edges(self):
        """Stored ``(i, j, w)`` triples, both directions included."""
        coo = self.weights.tocoo()
        return coo.row, coo.col, coo.data


@dataclass(frozen=True)
class SpectralEmbedding:
    coords: np.ndarray  # (n, K); rows unit-norm except flagged zero rows
    eigenvalues: np.ndarray  # (K,) ascending
    zero_rows: np.ndarray  # (n,) bool


@dataclass(frozen=True)
class ClusterModel:
    K: int
    labels: np.ndarray
    centroids: np.ndarray
    seed: int
    subset_indices: Optional[np.ndarray] = None
    inertia: float = 0.0
    eigenvalues: Optional[np.ndarray] = None
    gamma: Optional[float] = None
    embedding: Optional[SpectralEmbedding] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.K):
            raise ValueError("labels out of range")

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)

    def to_dict(self) -> dict:
        return {
            "K": int(self.K),
            "seed": int(self.seed),
            "labels": [int(v) for v in self.labels],
            "subset_indices": (None if self.subset_indices is None
                               else [int(v) for v in self.subset_indices]),
            "centroids": [[float(v) for v in row] for row in self.centroids],
            "inertia": float(self.inertia),
            "eigenvalues": (None if self.eigenvalues is None
                            else [float(v) for v in self.eigenvalues]),
            "gamma": None if self.gamma is None else float(self.gamma),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterModel":
        subset = d.get("subset_indices")
        eig = d.get("eigenvalues")
        K = int(d["K"])
        return cls(
            K=K,
            labels=np.asarray(d["labels"], dtype=np.int64),
            centroids=np.asarray(d.get("centroids") or np.zeros((K, K)), dtype=float),
            seed=int(d["seed"]),
            subset_indices=None if subset is None else np.asarray(subset, dtype=np.int64),
            inertia=float(d.get("inertia", 0.0)),
            eigenvalues=None if eig is None else np.asarray(eig, dtype=float),
            gamma=d.get("gamma"),
        )


# --------------------------------------------------------------------------
# graph construction


def rbf_weight(x, y, gamma: float) -> float:
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return float(np.exp(-gamma * np.dot(diff, diff)))


def _knn_query(X: np.ndarray, knn: int):
    """Distances and indices of each point's ``knn`` nearest other points."""
    n = len(X)
    tree = cKDTree(X)
    k = min(knn + 1, n)
    dist, idx = tree.query(X, k=k)
    dist = dist.reshape(n, k)
    idx = idx.reshape(n, k)
    out_d = np.empty((n, knn))
    out_i = np.empty((n, knn), dtype=np.int64)
    for i in range(n):
        # with duplicates the point itself need not come first
        keep = idx[i] != i
        if keep.all():
            keep[-1] = False
        out_d[i] = dist[i][keep][:knn]
        out_i[i] = idx[i][keep][:knn]
    return out_d, out_i


def median_gamma(features, knn: int = 10, seed: int = 0, probe_size: int = 1000) -> float:
    """Median-heuristic RBF bandwidth ``1 / (2 * median_knn_distance^2)``."""
    X = _as_array(features)
    n = len(X)
    knn = min(knn, n - 1)
    rng = np.random.default_rng([seed, 1])
    probe = np.sort(rng.choice(n, size=min(probe_size, n), replace=False))
    tree = cKDTree(X)
    dist, _ = tree.query(X[probe], k=knn + 1)
    dist = np.asarray(dist).reshape(len(probe), -1)[:, 1:]
    sigma = float(np.median(dist))
    if sigma <= 0:
        return 1.0
    return 1.0 / (2.0 * sigma**2)


def build_knn_graph(features, config: KernelConfig = KernelConfig(), seed: int = 0) -> SimilarityGraph:
    """Union-symmetrized kNN graph with RBF edge weights.

    Weights are floored at the smallest positive double so that a far-away
    neighbour still keeps its node connected.
    """
    X = _as_array(features)
    n = len(X)
    if n < config.knn + 1:
        raise ValueError(f"need at least knn + 1 = {config.knn + 1} points, got {n}")
    gamma = config.gamma
    if gamma is None:
        gamma = median_gamma(X, config.knn, seed, config.probe_size)
    dist, idx = _knn_query(X, config.knn)
    notes = []
    degenerate = np.all(dist == 0, axis=1)
    if degenerate.any():
        msg = (f"{int(degenerate.sum())} node(s) have only zero-distance neighbours; "
               "their edges get weight 1")
        warnings.warn(msg, DegenerateGeometryWarning, stacklevel=2)
        notes.append(msg)
    w = np.maximum(np.exp(-gamma * dist**2), _TINY)
    rows = np.repeat(np.arange(n), config.knn)
    A = sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, n))
    W = A.maximum(A.T).tocsr()
    W.setdiag(0)
    W.eliminate_zeros()
    W.sort_indices()
    return SimilarityGraph(W, float(gamma), tuple(notes))


def subsample(features, m: int, seed: int = 0) -> np.ndarray:
    """``m`` distinct row indices drawn uniformly, returned sorted."""
    n = len(_as_array(features))
    if not 1 <= m <= n:
        raise ValueError(f"subset size must be in [1, {n}], got {m}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=m, replace=False))


# --------------------------------------------------------------------------
# Laplacian and embedding


def normalized_laplacian(graph) -> np.ndarray:
    """Dense ``I - D^-1/2 W D^-1/2``."""
    W = graph.weights if isinstance(graph, SimilarityGraph) else graph
    W = W.toarray() if sparse.issparse(W) else np.asarray(W, dtype=float)
    deg = W.sum(axis=1)
    if np.any(deg <= 0):
        bad = np.flatnonzero(deg <= 0)
        raise IsolatedNode(f"{len(bad)} node(s) have zero degree, first is {bad[0]}")
    inv = 1.0 / np.sqrt(deg)
    L = -(inv[:, None] * W * inv[None, :])
    L[np.diag_indices_from(L)] += 1.0
    return 0.5 * (L + L.T)


def eigendecompose(laplacian: np.ndarray):
    """All eigenpairs, ascending, with each vector's largest entry made positive."""
    try:
        vals, vecs = np.linalg.eigh(laplacian)
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vals, vecs * signs


def embedding_from(eigenvalues, eigenvectors, K: int) -> SpectralEmbedding:
    n = eigenvectors.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"K must be in [1, {n}], got {K}")
    U = np.array(eigenvectors[:, :K], dtype=float)
    norms = np.linalg.norm(U, axis=1)
    zero = norms < 1e-12
    U[~zero] /= norms[~zero, None]
    return SpectralEmbedding(U, np.array(eigenvalues[:K]), zero)


def embed(laplacian: np.ndarray, K: int) -> SpectralEmbedding:
    if K < 2:
        raise ValueError("embedding needs K >= 2")
    vals, vecs = eigendecompose(laplacian)
    return embedding_from(vals, vecs, K)


# --------------------------------------------------------------------------
# k-means


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X, K, rng):
    n = len(X)
    centers = np.empty((K, X.shape[1]))
    first = rng.integers(n)
    centers[0] = X[first]
    d2 = ((X - X[first]) ** 2).sum(1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            i = rng.integers(n)
        else:
            i = rng.choice(n, p=d2 / total)
        centers[k] = X[i]
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(1))
    return centers


def _fill_empty(X, labels, C, K):
    """Move the farthest points into empty clusters; returns the count moved."""
    moved = 0
    counts = np.bincount(labels, minlength=K)
    for k in np.flatnonzero(counts == 0):
        d = ((X - C[labels]) ** 2).sum(1)
        d[counts[labels] <= 1] = -1.0  # never empty another cluster
        i = int(np.argmax(d))
        counts[labels[i]] -= 1
        labels[i] = k
        counts[k] = 1
        C[k] = X[i]
        moved += 1
    return moved


def _lloyd(X, C, max_iter, tol):
    K = len(C)
    for _ in range(max_iter):
        labels = np.argmin(_sq_dists(X, C), axis=1)
        _fill_empty(X, labels, C, K)
        newC = np.array([X[labels == k].mean(0) for k in range(K)])
        shift = np.sqrt(((newC - C) ** 2).sum(1)).max()
        C = newC
        if shift < tol:
            break
    labels = np.argmin(_sq_dists(X, C), axis=1)
    if _fill_empty(X, labels, C, K):
        C = np.array([X[labels == k].mean(0) for k in range(K)])
    inertia = float(((X - C[labels]) ** 2).sum())
    return labels, C, inertia


def kmeans(embedding, K: int, seed: int = 0, n_init: int = 10,
           max_iter: int = 300, tol: float = 1e-6) -> ClusterModel:
    """Best of ``n_init`` k-means++ restarts by inertia (ties: earliest restart).

    Zero rows of a :class:`SpectralEmbedding` are left out of the fit and then
    assigned to their nearest centroid.
    """
    if isinstance(embedding, SpectralEmbedding):
        X, zero = embedding.coords, embedding.zero_rows
    else:
        X = np.asarray(embedding, dtype=float)
        zero = np.zeros(len(X), dtype=bool)
    Xa = X[~zero]
    if len(Xa) < K:
        raise ClusteringError(f"{len(Xa)} usable rows cannot form {K} clusters")
    best = None
    for ss in np.random.SeedSequence(seed).spawn(n_init):
        rng = np.random.default_rng(ss)
        labels, C, inertia = _lloyd(Xa, _kmeans_pp(Xa, K, rng), max_iter, tol)
        if best is None or inertia < best[2]:
            best = (labels, C, inertia)
    labels_a, C, inertia = best
    labels = np.empty(len(X), dtype=np.int64)
    labels[~zero] = labels_a
    if zero.any():
        labels[zero] = np.argmin(_sq_dists(X[zero], C), axis=1)
    return ClusterModel(K=K, labels=labels, centroids=C, seed=seed, inertia=inertia)


def assign_remaining(features, model, subset) -> np.ndarray:
    """Extend subset labels to every row by nearest subset neighbour."""
    X = _as_array(features)
    subset = np.asarray(subset, dtype=np.int64)
    sub_labels = model.labels if isinstance(model, ClusterModel) else np.asarray(model)
    if len(sub_labels) != len(subset):
        raise ValueError("model labels must be indexed by subset position")
    _, nearest = cKDTree(X[subset]).query(X, k=1)
    labels = np.asarray(sub_labels)[nearest]
    labels[subset] = sub_labels
    return labels.astype(np.int64)


# --------------------------------------------------------------------------
# orchestration


@dataclass(frozen=True)
class SpectralBasis:
    """Eigendecomposition shared by every ``K`` evaluated on one dataset."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    gamma: float
    subset: Optional[np.ndarray]
    graph_notes: tuple = ()


def spectral_basis(features, config: KernelConfig = KernelConfig(), seed: int = 0) -> SpectralBasis:
    X = _as_array(features)
    subset = None
    if len(X) > config.dense_threshold:
        subset = subsample(X, min(config.subset_size, len(X)), seed)
        X = X[subset]
    graph = build_knn_graph(X, config, seed)
    vals, vecs = eigendecompose(normalized_laplacian(graph))
    return SpectralBasis(vals, vecs, graph.gamma, subset, graph.warnings)


def cluster_from_basis(features, basis: SpectralBasis, K: int, seed: int = 0) -> ClusterModel:
    emb = embedding_from(basis.eigenvalues, basis.eigenvectors, K)
    km = kmeans(emb, K, seed)
    labels = km.labels
    if basis.subset is not None:
        labels = assign_remaining(features, km, basis.subset)
    return ClusterModel(
        K=K, labels=labels, centroids=km.centroids, seed=seed,
        subset_indices=basis.subset, inertia=km.inertia,
        eigenvalues=emb.eigenvalues, gamma=basis.gamma, embedding=emb,
    )


def cluster(features, K: int, config: KernelConfig = KernelConfig(), seed: int = 0) -> ClusterModel:
    """Partition ``features`` into ``K`` non-empty spectral clusters."""
    if K < 2:
        raise ValueError("cluster needs K >= 2")
    return cluster_from_basis(features, spectral_basis(features, config, seed), K, seed)


def write_cluster_raster(model: ClusterModel, features: FeatureMatrix, path, nodata: int = -1) -> None:
    """Cluster ids on the source grid; masked cells carry ``nodata``."""
    g = features.grid
    img = np.full((g.height, g.width), nodata, dtype=np.int16)
    img[features.cell_index[:, 0], features.cell_index[:, 1]] = model.labels
    write_geotiff(path, img, g.geo_transform, nodata=nodata, names=["cluster_id"])
