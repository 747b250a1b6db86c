"""Conditioned Latin hypercube sampling (cLHS) by simulated annealing.

The objective is ``w1*O1 + w2*O2 + w3*O3``:

* ``O1`` sums ``|count - 1|`` over the ``n`` equal-probability quantile
  strata of every continuous covariate;
* ``O2`` sums ``|sample proportion - population proportion|`` over the
  categories of every categorical covariate;
* ``O3`` sums ``|r_sample - r_population|`` over covariate pairs.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _anneal_kernel
from .errors import BudgetExceedsCandidates
from .ingest import FeatureMatrix

# a selected column counts as constant below this fraction of the population variance
VAR_FLOOR = 1e-12


def quantile_strata(candidates, n: int) -> np.ndarray:
    """``(D, n + 1)`` stratum edges at the ``j/n`` linear-interpolation quantiles."""
    X = np.asarray(candidates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if n < 1:
        raise ValueError("need at least one stratum")
    if len(X) < n:
        raise BudgetExceedsCandidates(f"{n} strata but only {len(X)} candidates")
    return np.quantile(X, np.linspace(0.0, 1.0, n + 1), axis=0, method="linear").T.copy()


def stratum_of(values, edges) -> np.ndarray:
    """Stratum index of each value; a value on an inner edge goes to the lower stratum."""
    return np.searchsorted(edges[1:-1], values, side="left")


def _correlation(X: np.ndarray, floor: np.ndarray) -> np.ndarray:
    """Pearson correlation with constant columns given zero off-diagonal terms."""
    D = X.shape[1]
    R = np.eye(D)
    if len(X) < 2:
        return R
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (len(X) - 1)
    var = np.diag(C)
    ok = var > floor
    sd = np.sqrt(np.where(ok, var, 1.0))
    R = C / np.outer(sd, sd)
    R[~ok, :] = 0.0
    R[:, ~ok] = 0.0
    np.fill_diagonal(R, 1.0)
    return R


@dataclass(frozen=True)
class CLHSProblem:
    candidates: np.ndarray
    n: int
    quantile_edges: np.ndarray
    target_correlation: np.ndarray
    weights: tuple = (1.0, 1.0, 1.0)
    categorical: Optional[np.ndarray] = None
    # derived
    strata: np.ndarray = field(init=False, repr=False)
    active: np.ndarray = field(init=False, repr=False)
    var_floor: np.ndarray = field(init=False, repr=False)
    cat_codes: np.ndarray = field(init=False, repr=False)
    pop_proportions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        X = np.asarray(self.candidates, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "candidates", X)
        if self.n > len(X):
            raise BudgetExceedsCandidates(f"budget {self.n} exceeds {len(X)} candidates")
        if self.n < 1:
            raise ValueError("budget must be at least 1")
        if any(w < 0 for w in self.weights):
            raise ValueError("objective weights must be non-negative")
        E = self.quantile_edges
        strata = np.column_stack([stratum_of(X[:, d], E[d]) for d in range(X.shape[1])])
        object.__setattr__(self, "strata", strata.astype(np.int64))
        object.__setattr__(self, "active", E[:, 0] < E[:, -1])
        object.__setattr__(self, "var_floor", VAR_FLOOR * X.var(axis=0, ddof=1)
                           if len(X) > 1 else np.zeros(X.shape[1]))
        if self.categorical is None:
            codes = np.zeros((len(X), 0), dtype=np.int64)
            props = np.zeros(0)
        else:
            cat = np.asarray(self.categorical)
            if cat.ndim == 1:
                cat = cat[:, None]
            cols, props, offset = [], [], 0
            for c in range(cat.shape[1]):
                levels, inv, cnt = np.unique(cat[:, c], return_inverse=True, return_counts=True)
                cols.append(inv.ravel() + offset)
                props.append(cnt / len(X))
                offset += len(levels)
            codes = np.column_stack(cols).astype(np.int64)
            props = np.concatenate(props)
        object.__setattr__(self, "cat_codes", codes)
        object.__setattr__(self, "pop_proportions", props)

    @classmethod
    def build(cls, candidates, n: int, categorical=None, weights=(1.0, 1.0, 1.0)) -> "CLHSProblem":
        X = np.asarray(candidates, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if n > len(X):
            raise BudgetExceedsCandidates(f"budget {n} exceeds {len(X)} candidates")
        floor = VAR_FLOOR * X.var(axis=0, ddof=1) if len(X) > 1 else np.zeros(X.shape[1])
        return cls(X, n, quantile_strata(X, n), _correlation(X, floor),
                   tuple(float(w) for w in weights), categorical)

    @property
    def n_candidates(self) -> int:
        return self.candidates.shape[0]


def objective_terms(selected, problem: CLHSProblem) -> tuple:
    """Unweighted ``(O1, O2, O3)`` for the rows in ``selected``."""
    sel = np.asarray(selected, dtype=np.int64)
    n = len(sel)
    p = problem
    o1 = 0.0
    for d in np.flatnonzero(p.active):
        counts = np.bincount(p.strata[sel, d], minlength=p.quantile_edges.shape[1] - 1)
        o1 += float(np.abs(counts - 1).sum())
    o2 = 0.0
    if p.cat_codes.shape[1] and n:
        counts = np.bincount(p.cat_codes[sel].ravel(), minlength=len(p.pop_proportions))
        o2 = float(np.abs(counts / n - p.pop_proportions).sum())
    o3 = 0.0
    if n >= 3:
        act = np.flatnonzero(p.active)
        Xs = p.candidates[np.ix_(sel, act)]
        R = _correlation(Xs, p.var_floor[act])
        ok = Xs.var(axis=0, ddof=1) > p.var_floor[act]
        T = p.target_correlation[np.ix_(act, act)]
        iu = np.triu_indices(len(act), 1)
        both = ok[iu[0]] & ok[iu[1]]
        o3 = float(np.abs(R[iu] - T[iu])[both].sum())
    return o1, o2, o3


def objective(selected, problem: CLHSProblem) -> float:
    w1, w2, w3 = problem.weights
    o1, o2, o3 = objective_terms(selected, problem)
    return w1 * o1 + w2 * o2 + w3 * o3


@dataclass(frozen=True)
class AnnealingSchedule:
    """Geometric cooling ``T = t0 * cooling**epoch``.

    ``moves_per_temp`` defaults to ``10 * n``, raised for small ``n`` so that
    ``total_moves`` are spread over the epochs it takes to cool to
    ``t_min_ratio * t0`` rather than wasted at near-zero temperature.
    ``iterations`` (the number of epochs) defaults to whatever brings the
    total near ``total_moves``.
    """

    t0: float = 1.0
    cooling: float = 0.95
    iterations: Optional[int] = None
    moves_per_temp: Optional[int] = None
    p_worst_swap: float = 0.2
    total_moves: int = 30_000
    t_min_ratio: float = 1e-3

    def __post_init__(self):
        if not self.t0 > 0:
            raise ValueError("t0 must be positive")
        if not 0 < self.cooling < 1:
            raise ValueError("cooling must lie in (0, 1)")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not 0 <= self.p_worst_swap <= 1:
            raise ValueError("p_worst_swap is a probability")
        if not 0 < self.t_min_ratio < 1:
            raise ValueError("t_min_ratio must lie in (0, 1)")

    def resolve(self, n: int) -> tuple:
        mpt = self.moves_per_temp
        if mpt is None:
            cool_epochs = math.ceil(math.log(self.t_min_ratio) / math.log(self.cooling))
            mpt = max(10 * n, math.ceil(self.total_moves / cool_epochs))
        epochs = self.iterations or max(1, round(self.total_moves / mpt))
        return int(epochs), int(mpt)

    @classmethod
    def from_dict(cls, d: dict) -> "AnnealingSchedule":
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "t0": self.t0, "cooling": self.cooling, "iterations": self.iterations,
            "moves_per_temp": self.moves_per_temp, "p_worst_swap": self.p_worst_swap,
            "total_moves": self.total_moves, "t_min_ratio": self.t_min_ratio,
        }


@dataclass(frozen=True)
class CLHSDesign:
    selected: np.ndarray
    objective: float
    trace: np.ndarray  # (iteration, temperature, current, best)
    seed: int
    terms: tuple = (0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "selected": [int(i) for i in self.selected],
            "objective": float(self.objective),
            "terms": {"O1": self.terms[0], "O2": self.terms[1], "O3": self.terms[2]},
            "seed": int(self.seed),
        }

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["iteration", "temperature", "objective", "best"])
        for it, t, cur, best in self.trace:
            w.writerow([int(it), repr(float(t)), repr(float(cur)), repr(float(best))])
        return buf.getvalue()


def anneal(problem: CLHSProblem, schedule: AnnealingSchedule = AnnealingSchedule(),
           seed: int = 0) -> CLHSDesign:
    """Metropolis search over ``n``-subsets; returns the best design visited."""
    n, n_c = problem.n, problem.n_candidates
    if n > n_c:
        raise BudgetExceedsCandidates(f"budget {n} exceeds {n_c} candidates")
    rng = np.random.default_rng(seed)
    init = np.sort(rng.choice(n_c, size=n, replace=False))
    if n == n_c:
        value = objective(init, problem)
        trace = np.array([[0.0, schedule.t0, value, value]])
        return CLHSDesign(init, value, trace, seed, objective_terms(init, problem))
    epochs, mpt = schedule.resolve(n)
    uniforms = rng.random((epochs * mpt, 5))
    in_sample = np.zeros(n_c, dtype=bool)
    in_sample[init] = True
    act = np.flatnonzero(problem.active)
    Xa = problem.candidates[:, act]
    Xc = Xa - Xa.mean(axis=0)
    w1, w2, w3 = problem.weights
    best_sel, _, trace = _anneal_kernel.run_chain(
        problem.strata, problem.active, problem.cat_codes, problem.pop_proportions,
        np.ascontiguousarray(Xc), problem.var_floor[act],
        np.ascontiguousarray(problem.target_correlation[np.ix_(act, act)]),
        float(w1), float(w2), float(w3), problem.quantile_edges.shape[1] - 1,
        init, np.flatnonzero(~in_sample), float(schedule.t0), float(schedule.cooling),
        epochs, mpt, float(schedule.p_worst_swap), uniforms,
    )
    selected = np.sort(best_sel)
    terms = objective_terms(selected, problem)
    value = w1 * terms[0] + w2 * terms[1] + w3 * terms[2]
    return CLHSDesign(selected, value, trace, seed, terms)


def anneal_restarts(problem: CLHSProblem, schedule: AnnealingSchedule,
                    seeds: Sequence[int], threads: int = 1) -> CLHSDesign:
    """Independent chains; the lowest objective wins, ties going to the lowest seed."""
    seeds = sorted(seeds)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            designs = list(pool.map(lambda s: anneal(problem, schedule, s), seeds))
    else:
        designs = [anneal(problem, schedule, s) for s in seeds]
    return min(designs, key=lambda d: d.objective)


def vanilla_clhs(features, n: int, schedule: AnnealingSchedule = AnnealingSchedule(),
                 weights=(1.0, 1.0, 1.0), seed: int = 0, categorical=None) -> CLHSDesign:
    """One global cLHS run over every cell, ignoring zones."""
    X = features.values if isinstance(features, FeatureMatrix) else features
    return anneal(CLHSProblem.build(X, n, categorical, weights), schedule, seed)

