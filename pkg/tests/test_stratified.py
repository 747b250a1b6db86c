import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import blobs
from speclhs.clhs import AnnealingSchedule, CLHSProblem, vanilla_clhs
from speclhs.errors import BudgetTooSmall, InfeasibleBudget, OverrideInfeasible
from speclhs.ingest import MaskRule, build_feature_matrix, load_stack, normalize
from speclhs.spectral import cluster
from speclhs.stratified import (
    AllocationPlan,
    allocate,
    derive_seed,
    override_allocation,
    spectral_clhs,
)

FAST = AnnealingSchedule(total_moves=3000)


# allocate


def test_ten_percent_cluster_gets_ten_of_hundred():
    plan = allocate([100, 300, 600], 100)
    assert plan.counts == (10, 30, 60)


def test_budget_equal_to_cluster_count():
    assert allocate([5, 900, 1, 40], 4).counts == (1, 1, 1, 1)


def test_known_sizes_match_apportionment_oracle():
    plan = allocate([1300, 500, 200], 10)
    assert list(plan.counts) == oracles.apportion([1300, 500, 200], 10)
    assert plan.counts == (7, 2, 1)


def test_floor_cases_and_full_budget():
    assert allocate([1000, 1, 1], 10).counts == (8, 1, 1)
    assert allocate([2, 50, 50], 40).counts == (1, 20, 19)
    assert allocate([3, 3, 3], 9).counts == (3, 3, 3)


def test_remainder_ties_go_to_lower_cluster():
    assert allocate([10, 10, 10], 4).counts == (2, 1, 1)
    assert allocate([10, 10, 10], 5).counts == (2, 2, 1)


def test_allocation_errors():
    with pytest.raises(BudgetTooSmall):
        allocate([4, 4, 4], 2)
    with pytest.raises(InfeasibleBudget):
        allocate([1, 2], 4)
    with pytest.raises(ValueError):
        allocate([0, 3], 2)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=1, max_size=12), st.data())
def test_allocation_invariants(sizes, data):
    n = data.draw(st.integers(len(sizes), sum(sizes)))
    plan = allocate(sizes, n)
    assert sum(plan.counts) == n
    assert min(plan.counts) >= 1
    assert all(c <= s for c, s in zip(plan.counts, sizes))
    assert list(plan.counts) == oracles.apportion(sizes, n)
    quota = [n * s / sum(sizes) for s in sizes]
    if all(q >= 1 for q in quota):
        assert all(abs(c - q) < 1 for c, q in zip(plan.counts, quota))


def test_plan_rejects_broken_counts():
    with pytest.raises(ValueError):
        AllocationPlan((2, 2), (5, 5), 5)
    with pytest.raises(ValueError):
        AllocationPlan((0, 5), (5, 5), 5)


# override_allocation


def test_override_to_current_count_is_identity():
    plan = allocate([40, 30, 30], 10)
    assert override_allocation(plan, {1: plan.counts[1]}) is plan


def test_override_forces_remaining_split():
    plan = allocate([10, 10, 10], 6)
    assert override_allocation(plan, {0: 4}).counts == (4, 1, 1)


def test_override_errors():
    plan = allocate([10, 10, 10], 6)
    with pytest.raises(OverrideInfeasible):
        override_allocation(plan, {0: 5})  # one left for two clusters
    with pytest.raises(OverrideInfeasible):
        override_allocation(plan, {0: 11})
    with pytest.raises(OverrideInfeasible):
        override_allocation(plan, {3: 1})
    with pytest.raises(OverrideInfeasible):
        override_allocation(plan, {0: 1, 1: 1, 2: 1})


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=2, max_size=8), st.data())
def test_random_overrides_keep_invariants(sizes, data):
    n = data.draw(st.integers(len(sizes), sum(sizes)))
    plan = allocate(sizes, n)
    k = data.draw(st.integers(0, len(sizes) - 1))
    v = data.draw(st.integers(1, sizes[k]))
    try:
        new = override_allocation(plan, {k: v})
    except OverrideInfeasible:
        rest = [s for i, s in enumerate(sizes) if i != k]
        assert not len(rest) <= n - v <= sum(rest)
        return
    assert new.counts[k] == v
    assert sum(new.counts) == n
    assert all(1 <= c <= s for c, s in zip(new.counts, sizes))
    others = [i for i in range(len(sizes)) if i != k]
    if v != plan.counts[k]:
        ref = oracles.apportion([sizes[i] for i in others], n - v)
        assert [new.counts[i] for i in others] == ref


# spectral_clhs


def test_demo_ten_zones_ten_samples(demo_dir):
    files = ["s2_multitemporal.tif", "s2_recent.tif", "terrain.tif", "soil.tif"]
    raw = build_feature_matrix(load_stack([demo_dir / f for f in files]),
                               [MaskRule("ndvi_t1"), MaskRule("elevation")])
    feats, _ = normalize(raw)
    model = cluster(feats, 10, seed=42)
    design = spectral_clhs(feats, model, 10, seed=42)
    assert sorted(model.labels[design.merged_indices].tolist()) == list(range(10))


def test_single_zone_reduces_to_vanilla(rng):
    X = rng.normal(size=(60, 3))
    design = spectral_clhs(X, np.zeros(60, dtype=int), 7, FAST, seed=9)
    ref = vanilla_clhs(X, 7, FAST, seed=derive_seed(9, 0))
    np.testing.assert_array_equal(np.sort(design.merged_indices), ref.selected)


def test_small_blobs_reach_per_zone_optimum():
    X, y = blobs([12, 10, 8], D=2, spread=1.0, seed=3)
    design = spectral_clhs(X, y, 9, seed=1)
    assert design.allocation.counts == (4, 3, 2)
    for k, sub in design.per_cluster.items():
        idx = np.flatnonzero(y == k)
        n = design.allocation.counts[k]
        assert len(sub.selected) == n
        oracle = oracles.CLHSOracle(X[idx], n)
        best = min(oracle.objective(s) for s in itertools.combinations(range(len(idx)), n))
        assert abs(sub.objective - best) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1), st.data())
def test_every_zone_is_sampled_and_merge_is_exact(K, seed, data):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 40, K)
    labels = rng.permutation(np.repeat(np.arange(K), sizes))
    X = rng.normal(size=(len(labels), 2))
    n = data.draw(st.integers(K, min(int(sizes.sum()), 3 * K)))
    design = spectral_clhs(X, labels, n, FAST, seed=seed)
    merged = design.merged_indices
    assert len(merged) == n == len(np.unique(merged))
    assert set(labels[merged].tolist()) == set(range(K))
    parts = np.concatenate([design.cluster_indices(k) for k in range(K)])
    np.testing.assert_array_equal(parts, merged)
    for k in range(K):
        assert np.all(labels[design.cluster_indices(k)] == k)
        assert len(design.cluster_indices(k)) == design.allocation.counts[k]


def test_seed_isolation_under_override():
    X, y = blobs([40, 30, 20], D=2, spread=1.0, seed=5)
    base = spectral_clhs(X, y, 9, FAST, seed=4)
    plan = override_allocation(base.allocation, {0: 3, 1: 4})
    changed = spectral_clhs(X, y, 9, FAST, seed=4, allocation=plan)
    assert plan.counts[2] == base.allocation.counts[2]
    np.testing.assert_array_equal(changed.cluster_indices(2), base.cluster_indices(2))


def test_threads_do_not_change_the_design():
    X, y = blobs([30, 30, 30, 30], D=3, seed=6)
    a = spectral_clhs(X, y, 10, FAST, seed=2)
    b = spectral_clhs(X, y, 10, FAST, seed=2, threads=4)
    assert a.to_json() == b.to_json()


def test_design_json_and_objective(rng):
    X, y = blobs([20, 15], D=2, seed=7)
    d = spectral_clhs(X, y, 5, FAST, seed=0)
    payload = json.loads(d.to_json())
    assert payload["allocation"]["counts"] == list(d.allocation.counts)
    assert payload["total_objective"] == pytest.approx(sum(c["objective"] for c in payload["clusters"]))
    assert [c["cluster"] for c in payload["clusters"]] == [0, 1]


def test_mismatched_inputs(rng):
    X = rng.normal(size=(10, 2))
    with pytest.raises(ValueError):
        spectral_clhs(X, np.zeros(9, dtype=int), 2)
    with pytest.raises(BudgetTooSmall):
        spectral_clhs(X, np.arange(10) % 3, 2)
    with pytest.raises(ValueError):
        spectral_clhs(X, np.arange(10) % 2, 4, allocation=allocate([5, 5], 3))


def test_derived_seeds_are_stable_and_distinct():
    seeds = [derive_seed(42, k) for k in range(50)]
    assert len(set(seeds)) == 50
    assert seeds == [derive_seed(42, k) for k in range(50)]
    assert derive_seed(43, 0) != seeds[0]


def test_per_zone_problem_uses_zone_strata():
    X, y = blobs([25, 25], D=1, seed=8)
    d = spectral_clhs(X, y, 6, FAST, seed=0)
    for k in (0, 1):
        idx = np.flatnonzero(y == k)
        p = CLHSProblem.build(X[idx], d.allocation.counts[k])
        strata = p.strata[d.per_cluster[k].selected, 0]
        assert len(np.unique(strata)) == d.allocation.counts[k]
