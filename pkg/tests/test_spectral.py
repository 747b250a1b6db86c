import json
import math

import numpy as np
import pytest
import scipy.linalg
import tifffile
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse
from scipy.spatial.distance import cdist
from sklearn.metrics import adjusted_rand_score

import oracles
from conftest import blobs, random_graph, rings
from speclhs.errors import DegenerateGeometryWarning, IsolatedNode
from speclhs.ingest import FeatureMatrix, MaskRule, build_feature_matrix, load_stack, normalize
from speclhs.spectral import (
    ClusterModel,
    KernelConfig,
    assign_remaining,
    build_knn_graph,
    cluster,
    eigendecompose,
    embed,
    kmeans,
    median_gamma,
    normalized_laplacian,
    rbf_weight,
    subsample,
    write_cluster_raster,
)


def dense_laplacian(W):
    d = W.sum(axis=1)
    n = len(W)
    L = np.eye(n)
    for i in range(n):
        for j in range(n):
            L[i, j] -= W[i, j] / math.sqrt(d[i] * d[j])
    return L


# rbf_weight


def test_rbf_identical_points():
    assert rbf_weight([1.0, 2.0], [1.0, 2.0], 3.0) == 1.0


def test_rbf_unit_distance():
    assert rbf_weight([0.0], [1.0], 1.0) == pytest.approx(0.36787944117144233, abs=1e-15)


def test_rbf_matches_naive_loop(rng):
    for _ in range(20):
        x, y = rng.normal(size=6), rng.normal(size=6)
        gamma = rng.uniform(0.01, 2.0)
        d2 = 0.0
        for a, b in zip(x, y):
            d2 += (a - b) * (a - b)
        assert abs(rbf_weight(x, y, gamma) - math.exp(-gamma * d2)) <= 1e-12


# build_knn_graph


def test_collinear_middle_point_gets_two_edges():
    X = np.array([[0.0], [1.0], [3.0]])
    g = build_knn_graph(X, KernelConfig(gamma=1.0, knn=1))
    W = g.weights.toarray()
    assert np.count_nonzero(W[1]) == 2
    assert np.count_nonzero(W) == 4  # edges 0-1 and 1-2, both directions


def test_far_blobs_have_no_cross_edges():
    X, y = blobs([10, 10], D=2, spread=0.2, separation=50.0, seed=3)
    g = build_knn_graph(X, KernelConfig(knn=3))
    rows, cols, _ = g.edges()
    assert np.all(y[rows] == y[cols])
    # oracle: every inter-blob distance exceeds the largest intra-blob 3-NN distance
    intra = max(sorted(oracles.euclid(X[i], X[j]) for j in range(20) if y[j] == y[i] and j != i)[2]
                for i in range(20))
    inter = min(oracles.euclid(X[i], X[j]) for i in range(20) for j in range(20) if y[i] != y[j])
    assert inter > intra


def test_every_node_has_at_least_knn_edges(rng):
    g = build_knn_graph(rng.normal(size=(50, 3)), KernelConfig(knn=5))
    assert np.all(np.diff(g.weights.indptr) >= 5)


def test_graph_weights_are_rbf_of_distances(rng):
    X = rng.normal(size=(30, 2))
    g = build_knn_graph(X, KernelConfig(gamma=0.7, knn=4))
    for i, j, w in zip(*g.edges()):
        assert w == pytest.approx(math.exp(-0.7 * oracles.euclid(X[i], X[j]) ** 2), rel=1e-12)


def test_duplicate_points_warn_and_get_unit_weights():
    X = np.vstack([np.zeros((4, 2)), np.ones((4, 2))])
    with pytest.warns(DegenerateGeometryWarning):
        g = build_knn_graph(X, KernelConfig(knn=2))
    assert g.warnings
    assert np.allclose(g.weights.data, 1.0)
    assert np.all(g.weights.diagonal() == 0)


def test_graph_needs_more_points_than_neighbours():
    with pytest.raises(ValueError):
        build_knn_graph(np.zeros((3, 1)), KernelConfig(knn=3))


def test_median_gamma_heuristic(rng):
    X = rng.normal(size=(200, 2))
    gamma = median_gamma(X, knn=5, probe_size=10_000)
    D = cdist(X, X)
    np.fill_diagonal(D, np.inf)
    sigma = np.median(np.sort(D, axis=1)[:, :5])
    assert gamma == pytest.approx(1 / (2 * sigma**2), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(6, 40), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_graph_is_symmetric_with_matching_degree(n, knn, seed):
    X = np.random.default_rng(seed).normal(size=(n, 3))
    g = build_knn_graph(X, KernelConfig(knn=min(knn, n - 1)))
    W = g.weights
    assert abs(W - W.T).max() == 0
    assert np.all(W.diagonal() == 0)
    np.testing.assert_allclose(g.degree, np.asarray(W.toarray().sum(axis=1)), rtol=1e-12)
    assert np.all(g.degree > 0)
    assert np.all((W.data > 0) & (W.data <= 1))


# subsample


def test_subsample_examples(rng):
    X = rng.normal(size=(40, 2))
    np.testing.assert_array_equal(subsample(X, 40, seed=1), np.arange(40))
    one = subsample(X, 1, seed=2)
    assert len(one) == 1 and 0 <= one[0] < 40
    np.testing.assert_array_equal(subsample(X, 17, seed=3), subsample(X, 17, seed=3))
    s = subsample(X, 17, seed=3)
    assert len(np.unique(s)) == 17
    with pytest.raises(ValueError):
        subsample(X, 0)


# normalized_laplacian


def test_single_edge_laplacian():
    for w in (0.01, 0.5, 1.0):
        L = normalized_laplacian(sparse.csr_matrix([[0.0, w], [w, 0.0]]))
        np.testing.assert_allclose(L, [[1.0, -1.0], [-1.0, 1.0]], atol=1e-15)
        np.testing.assert_allclose(np.linalg.eigvalsh(L), [0.0, 2.0], atol=1e-12)


def test_isolated_node_raises():
    W = np.zeros((3, 3))
    W[0, 1] = W[1, 0] = 1.0
    with pytest.raises(IsolatedNode):
        normalized_laplacian(W)


@pytest.mark.parametrize("c", [1, 2, 3, 5])
def test_zero_multiplicity_counts_components(c):
    W = random_graph(30, 0.3, seed=c, groups=c)
    vals, _ = eigendecompose(normalized_laplacian(W))
    assert int(np.sum(np.abs(vals) <= 1e-8)) == c


def test_random_graph_spectrum_matches_dense_oracle():
    W = random_graph(20, 0.3, seed=7)
    ours = np.sort(eigendecompose(normalized_laplacian(sparse.csr_matrix(W)))[0])
    ref = scipy.linalg.eigh(dense_laplacian(W), eigvals_only=True)
    np.testing.assert_allclose(ours, ref, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.floats(0.0, 1.0), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_spectrum_bounds_and_symmetry(n, p, groups, seed):
    groups = min(groups, n)
    W = random_graph(n, p, seed, groups)
    if np.any(W.sum(axis=1) == 0):
        return  # singleton blocks are isolated nodes
    L = normalized_laplacian(W)
    assert np.abs(L - L.T).max() <= 1e-12
    vals = np.linalg.eigvalsh(L)
    assert vals.min() >= -1e-8 and vals.max() <= 2 + 1e-8
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if W[i, j] > 0]
    assert int(np.sum(np.abs(vals) <= 1e-8)) == oracles.components(n, edges)


# embed


def test_two_components_embed_to_two_points():
    W = random_graph(12, 0.5, seed=1, groups=2)
    emb = embed(normalized_laplacian(W), 2)
    rows = {tuple(np.round(np.abs(r), 9)) for r in emb.coords}
    assert len(rows) == 2
    first = {tuple(np.round(r, 9)) for r in emb.coords[:6]}
    second = {tuple(np.round(r, 9)) for r in emb.coords[6:]}
    assert len(first) == len(second) == 1 and first != second


def test_embedding_rows_are_unit_norm(rng):
    g = build_knn_graph(rng.normal(size=(60, 3)), KernelConfig(knn=6))
    emb = embed(normalized_laplacian(g), 4)
    np.testing.assert_allclose(np.linalg.norm(emb.coords[~emb.zero_rows], axis=1), 1.0, atol=1e-9)
    assert np.all(np.diff(emb.eigenvalues) >= 0)
    assert emb.eigenvalues.min() >= -1e-9 and emb.eigenvalues.max() <= 2 + 1e-9


def test_eigenpair_residuals():
    L = normalized_laplacian(random_graph(30, 0.25, seed=11))
    vals, vecs = eigendecompose(L)
    emb = embed(L, 4)
    np.testing.assert_allclose(emb.eigenvalues, vals[:4])
    for k in range(4):
        assert np.linalg.norm(L @ vecs[:, k] - vals[k] * vecs[:, k]) <= 1e-6


def test_embed_needs_two_dimensions():
    with pytest.raises(ValueError):
        embed(np.eye(3), 1)


# kmeans


def test_one_point_per_cluster_has_zero_inertia(rng):
    X = rng.normal(size=(6, 2))
    model = kmeans(X, 6, seed=0)
    assert model.inertia == 0.0
    assert sorted(model.labels.tolist()) == list(range(6))


def test_kmeans_recovers_two_blobs():
    X, y = blobs([40, 25], D=3, seed=5)
    assert adjusted_rand_score(y, kmeans(X, 2, seed=9).labels) == 1.0


def test_kmeans_is_deterministic(rng):
    X = rng.normal(size=(100, 3))
    a, b = kmeans(X, 5, seed=4), kmeans(X, 5, seed=4)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.inertia == b.inertia


def test_kmeans_fills_every_cluster():
    X = np.vstack([np.zeros((10, 2)), np.ones((1, 2)) * 5])
    model = kmeans(X, 3, seed=0)
    assert np.all(np.bincount(model.labels, minlength=3) >= 1)


def test_kmeans_inertia_is_no_worse_than_single_restart(rng):
    X = rng.normal(size=(150, 2))
    assert kmeans(X, 6, seed=2).inertia <= kmeans(X, 6, seed=2, n_init=1).inertia


# assign_remaining


def test_assign_identity_and_coincident(rng):
    X = rng.normal(size=(10, 2))
    labels = np.arange(10) % 3
    np.testing.assert_array_equal(assign_remaining(X, labels, np.arange(10)), labels)
    Y = np.vstack([X, X[4]])
    out = assign_remaining(Y, labels, np.arange(10))
    assert out[10] == labels[4]


def test_assign_matches_brute_force_scan(rng):
    X = rng.normal(size=(100, 3))
    subset = np.sort(rng.choice(100, 20, replace=False))
    sub_labels = rng.integers(0, 4, 20)
    out = assign_remaining(X, sub_labels, subset)
    assert out.tolist() == oracles.nearest_labels(X.tolist(), subset.tolist(), sub_labels.tolist())


# cluster


def test_rings_are_separated():
    X, y = rings(200, seed=1)
    model = cluster(X, 2, seed=0)
    assert adjusted_rand_score(y, model.labels) == 1.0
    assert adjusted_rand_score(y, kmeans(X, 2, seed=0).labels) < 0.5


def test_duplicated_groups_split_perfectly():
    X = np.vstack([np.zeros((15, 2)), np.full((15, 2), 3.0)])
    with pytest.warns(DegenerateGeometryWarning):
        model = cluster(X, 2, KernelConfig(knn=5), seed=0)
    assert adjusted_rand_score(np.repeat([0, 1], 15), model.labels) == 1.0


def test_cluster_serialization_is_deterministic():
    X, _ = blobs([30, 30, 30], D=2, seed=2)
    a = cluster(X, 3, seed=8)
    b = cluster(X, 3, seed=8)
    assert a.to_json() == b.to_json()
    back = ClusterModel.from_dict(json.loads(a.to_json()))
    np.testing.assert_array_equal(back.labels, a.labels)
    assert back.K == 3 and back.seed == 8


def test_permutation_equivariance():
    X, _ = blobs([40, 30, 20, 10], D=3, seed=6)
    perm = np.random.default_rng(0).permutation(len(X))
    a = cluster(X, 4, seed=1).labels
    b = cluster(X[perm], 4, seed=1).labels
    assert adjusted_rand_score(a[perm], b) == 1.0


def test_subset_mode_labels_every_cell():
    X, y = blobs([700, 500, 300], D=2, spread=0.5, seed=4)
    cfg = KernelConfig(subset_size=400, dense_threshold=1000)
    model = cluster(X, 3, cfg, seed=3)
    assert model.subset_indices is not None and len(model.subset_indices) == 400
    assert len(model.labels) == 1500
    assert np.all(model.sizes >= 1)
    assert adjusted_rand_score(y, model.labels) == 1.0


def test_demo_grid_gives_ten_nonempty_zones(demo_dir):
    files = ["s2_multitemporal.tif", "s2_recent.tif", "terrain.tif", "soil.tif"]
    stack = load_stack([demo_dir / f for f in files])
    raw = build_feature_matrix(stack, [MaskRule("ndvi_t1"), MaskRule("elevation")])
    feats, _ = normalize(raw)
    model = cluster(feats, 10, seed=42)
    assert model.K == 10
    assert np.all(model.sizes >= 1)


def test_cluster_raster_round_trip(tmp_path):
    X = np.arange(12.0).reshape(6, 2)
    fm = FeatureMatrix(X, [[0, 0], [0, 2], [1, 1], [2, 0], [2, 1], [2, 2]], ("a", "b"))
    fm = FeatureMatrix(fm.values, fm.cell_index, fm.covariate_names,
                       type(fm.grid)(3, 3, (0.0, 1.0, 0.0, 3.0, 0.0, -1.0)))
    model = ClusterModel(2, [0, 0, 1, 1, 0, 1], np.zeros((2, 2)), seed=0)
    write_cluster_raster(model, fm, tmp_path / "c.tif")
    img = tifffile.imread(tmp_path / "c.tif")
    assert img.tolist() == [[0, -1, 0], [-1, 1, -1], [1, 0, 1]]


def test_kernel_config_validation_and_dict():
    with pytest.raises(ValueError):
        KernelConfig(gamma=-1.0)
    with pytest.raises(ValueError):
        KernelConfig(knn=0)
    cfg = KernelConfig.from_dict({"gamma": "auto", "knn": 7})
    assert cfg.gamma is None and cfg.knn == 7
    assert KernelConfig.from_dict(cfg.to_dict()) == cfg
