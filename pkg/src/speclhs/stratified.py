"""Spectral-cLHS: budget allocation across zones and per-zone cLHS."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .clhs import AnnealingSchedule, CLHSDesign, CLHSProblem, anneal
from .errors import BudgetTooSmall, InfeasibleBudget, OverrideInfeasible
from .ingest import FeatureMatrix


@dataclass(frozen=True)
class AllocationPlan:
    counts: tuple
    cluster_sizes: tuple
    n: int

    def __post_init__(self):
        if sum(self.counts) != self.n:
            raise ValueError("allocation does not sum to the budget")
        if any(c < 1 or c > s for c, s in zip(self.counts, self.cluster_sizes)):
            raise ValueError("allocation violates the floor or a capacity cap")

    def to_dict(self) -> dict:
        return {"n": self.n, "counts": list(self.counts), "cluster_sizes": list(self.cluster_sizes)}


def _apportion(sizes: Mapping[int, int], budget: int) -> dict:
    """Largest-remainder apportionment of ``budget`` with a floor of one and caps.

    Quotas are ``budget * size / total`` computed in exact integer arithmetic;
    ties on the remainder go to the lower cluster id.
    """
    counts = {}
    free = sorted(sizes)
    while free:
        B = budget - sum(counts.values())
        S = sum(sizes[k] for k in free)
        if B < len(free) or B > S:
            raise InfeasibleBudget(f"cannot place {B} samples in clusters {free}")
        over = [k for k in free if B * sizes[k] > S * sizes[k]]
        under = [k for k in free if B * sizes[k] < S]
        if over:
            for k in over:
                counts[k] = sizes[k]
        elif under:
            for k in under:
                counts[k] = 1
        else:
            floors = {k: B * sizes[k] // S for k in free}
            rems = {k: B * sizes[k] % S for k in free}
            left = B - sum(floors.values())
            for k in sorted(free, key=lambda k: (-rems[k], k))[:left]:
                floors[k] += 1
            counts.update(floors)
            break
        free = [k for k in free if k not in counts]
    if sum(counts.values()) != budget:
        raise InfeasibleBudget(f"cannot place {budget} samples")
    return counts


def allocate(cluster_sizes, n: int) -> AllocationPlan:
    """Split ``n`` across clusters roughly in proportion to size, at least one each."""
    sizes = [int(s) for s in cluster_sizes]
    if any(s < 1 for s in sizes):
        raise ValueError("every cluster must hold at least one cell")
    if n < len(sizes):
        raise BudgetTooSmall(f"budget {n} is smaller than the {len(sizes)} clusters")
    if n > sum(sizes):
        raise InfeasibleBudget(f"budget {n} exceeds the {sum(sizes)} available cells")
    counts = _apportion(dict(enumerate(sizes)), n)
    return AllocationPlan(tuple(counts[k] for k in range(len(sizes))), tuple(sizes), n)


def override_allocation(plan: AllocationPlan, overrides: Mapping[int, int]) -> AllocationPlan:
    """Pin some cluster counts and re-apportion the rest of the budget."""
    K = len(plan.counts)
    overrides = {int(k): int(v) for k, v in overrides.items()}
    for k, v in overrides.items():
        if not 0 <= k < K:
            raise OverrideInfeasible(f"no cluster {k}")
        if not 1 <= v <= plan.cluster_sizes[k]:
            raise OverrideInfeasible(
                f"cluster {k} needs 1..{plan.cluster_sizes[k]} samples, got {v}")
    if all(plan.counts[k] == v for k, v in overrides.items()):
        return plan
    rest = {k: plan.cluster_sizes[k] for k in range(K) if k not in overrides}
    remaining = plan.n - sum(overrides.values())
    if not rest:
        if remaining != 0:
            raise OverrideInfeasible(f"overrides sum to {plan.n - remaining}, budget is {plan.n}")
        counts = {}
    else:
        if remaining < len(rest) or remaining > sum(rest.values()):
            raise OverrideInfeasible(
                f"{remaining} samples left for {len(rest)} clusters holding "
                f"{sum(rest.values())} cells")
        counts = _apportion(rest, remaining)
    counts.update(overrides)
    return AllocationPlan(tuple(counts[k] for k in range(K)), plan.cluster_sizes, plan.n)


def derive_seed(master_seed: int, cluster_id: int) -> int:
    """Seed for one zone's chain; independent of how many zones run or in what order."""
    return int(np.random.SeedSequence([int(master_seed), int(cluster_id)]).generate_state(1)[0])


@dataclass(frozen=True)
class StratifiedDesign:
    per_cluster: dict  # cluster id -> CLHSDesign (indices local to the zone)
    members: dict  # cluster id -> global row indices of the zone
    merged_indices: np.ndarray
    allocation: AllocationPlan

    @property
    def total_objective(self) -> float:
        return float(sum(d.objective for d in self.per_cluster.values()))

    def cluster_indices(self, k: int) -> np.ndarray:
        return self.members[k][self.per_cluster[k].selected]

    def to_dict(self) -> dict:
        return {
            "allocation": self.allocation.to_dict(),
            "total_objective": self.total_objective,
            "merged_indices": [int(i) for i in self.merged_indices],
            "clusters": [
                {
                    "cluster": int(k),
                    "count": int(len(d.selected)),
                    "objective": float(d.objective),
                    "seed": int(d.seed),
                    "indices": [int(i) for i in self.cluster_indices(k)],
                }
                for k, d in sorted(self.per_cluster.items())
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def spectral_clhs(features, labels, n: int, schedule: AnnealingSchedule = AnnealingSchedule(),
                  weights=(1.0, 1.0, 1.0), seed: int = 0,
                  allocation: Optional[AllocationPlan] = None, categorical=None,
                  threads: int = 1) -> StratifiedDesign:
    """Run cLHS separately inside every zone and merge the results.

    ``labels`` is a :class:`~speclhs.spectral.ClusterModel` or a plain label
    array. Each zone is stratified on its own cells with as many strata as it
    has samples.
    """
    X = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    K = getattr(labels, "K", None)
    labels = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    if K is None:
        K = int(labels.max()) + 1
    if len(labels) != len(X):
        raise ValueError("labels must cover every feature row")
    sizes = np.bincount(labels, minlength=K)
    if allocation is None:
        allocation = allocate(sizes, n)
    elif allocation.n != n or tuple(allocation.cluster_sizes) != tuple(int(s) for s in sizes):
        raise ValueError("allocation plan does not match the labels and budget")
    cat = None if categorical is None else np.asarray(categorical)
    members = {k: np.flatnonzero(labels == k) for k in range(K)}

    def run(k):
        idx = members[k]
        sub_cat = None if cat is None else cat[idx]
        problem = CLHSProblem.build(X[idx], allocation.counts[k], sub_cat, weights)
        return anneal(problem, schedule, derive_seed(seed, k))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            designs = list(pool.map(run, range(K)))
    else:
        designs = [run(k) for k in range(K)]
    per_cluster = dict(enumerate(designs))
    merged = np.concatenate([members[k][d.selected] for k, d in per_cluster.items()])
    return StratifiedDesign(per_cluster, members, merged, allocation)
