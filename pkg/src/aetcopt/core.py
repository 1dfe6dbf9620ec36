"""Shared types for multi-fidelity estimation.

Model index 0 is always the high-fidelity model; indices 1..n are the
low-fidelity models. A subset of model indices is represented as a sorted
tuple of ints, which makes it hashable and gives deterministic matrix
layouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping

import numpy as np

Subset = tuple[int, ...]


class AetcError(Exception):
    """Base class for all errors raised by this package."""


class NotASubset(AetcError):
    pass


class DimensionMismatch(AetcError):
    pass


class InsufficientSamples(AetcError):
    pass


class RankDeficient(AetcError):
    pass


class SingularMatrix(AetcError):
    pass


class SingularNormalMatrix(SingularMatrix):
    pass


class SingularGroupCovariance(SingularMatrix):
    pass


class Infeasible(AetcError):
    pass


class ExploitationInfeasible(Infeasible):
    pass


class NumericalFailure(AetcError):
    pass


class OutOfDomain(AetcError):
    pass


class DegenerateLoss(AetcError):
    pass


class FixtureNotFound(AetcError):
    pass


class InadmissibleSubset(AetcError):
    """A subset cannot be scored with the current exploration data."""


# condition number above which a matrix is treated as singular
COND_LIMIT = 1e12


def subset(members: Iterable[int]) -> Subset:
    """Canonical form of a collection of model indices."""
    out = tuple(sorted({int(i) for i in members}))
    if any(i < 0 for i in out):
        raise ValueError(f"negative model index in {out}")
    return out


def restriction_matrix(universe: Iterable[int], target: Iterable[int]) -> np.ndarray:
    """0/1 matrix R with ``R @ v`` picking the ``target`` entries of a vector on ``universe``.

    Both index sets are canonicalised first, so rows follow ``target`` in
    ascending order.
    """
    universe = subset(universe)
    target = subset(target)
    pos = {idx: k for k, idx in enumerate(universe)}
    missing = [i for i in target if i not in pos]
    if missing:
        raise NotASubset(f"{target} is not contained in {universe} (missing {missing})")
    R = np.zeros((len(target), len(universe)))
    for row, idx in enumerate(target):
        R[row, pos[idx]] = 1.0
    return R


def positions(universe: Subset, target: Subset) -> list[int]:
    """Column positions of ``target`` inside ``universe``; cheaper than building R."""
    pos = {idx: k for k, idx in enumerate(universe)}
    try:
        return [pos[i] for i in target]
    except KeyError as err:
        raise NotASubset(f"{target} is not contained in {universe}") from err


def enumerate_subsets(n: int, max_size: int | None = None, start: int = 1) -> list[Subset]:
    """All nonempty subsets of ``{start, ..., start+n-1}`` with at most ``max_size`` members.

    Ordered by size, then lexicographically.
    """
    if max_size is None:
        max_size = n
    if not 1 <= max_size <= n:
        raise ValueError(f"max_size must lie in [1, {n}], got {max_size}")
    items = range(start, start + n)
    return [tuple(c) for size in range(1, max_size + 1) for c in combinations(items, size)]


def powerset(universe: Iterable[int]) -> list[Subset]:
    """Nonempty subsets of ``universe`` in size-then-lexicographic order."""
    universe = subset(universe)
    return [c for size in range(1, len(universe) + 1) for c in combinations(universe, size)]


def format_subset(S: Subset) -> str:
    return "{" + ",".join(str(i) for i in S) + "}"


def parse_subset(text: str) -> Subset:
    body = text.strip().strip("{}").strip()
    if not body:
        return ()
    return subset(int(tok) for tok in body.split(","))


@dataclass(frozen=True)
class MomentSet:
    """Means, covariance and mean evaluation costs for the models in ``indices``."""

    indices: Subset
    means: np.ndarray
    covariance: np.ndarray
    mean_costs: np.ndarray

    def __post_init__(self):
        idx = subset(self.indices)
        means = np.asarray(self.means, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        costs = np.asarray(self.mean_costs, dtype=float).reshape(-1)
        k = len(idx)
        if means.shape != (k,) or cov.shape != (k, k) or costs.shape != (k,):
            raise DimensionMismatch(
                f"indices {idx}: means {means.shape}, covariance {cov.shape}, costs {costs.shape}"
            )
        scale = max(np.abs(cov).max(initial=0.0), 1e-300)
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        if k and np.linalg.eigvalsh(cov).min() < -1e-10 * np.linalg.norm(cov, 2):
            raise ValueError("covariance is not positive semidefinite")
        if np.any(costs <= 0):
            raise ValueError("mean costs must be strictly positive")
        for name, arr in (("means", means), ("covariance", cov), ("mean_costs", costs)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "indices", idx)

    def restrict(self, target: Iterable[int]) -> "MomentSet":
        target = subset(target)
        p = positions(self.indices, target)
        return MomentSet(
            target,
            self.means[p],
            self.covariance[np.ix_(p, p)],
            self.mean_costs[p],
        )

    def cov_block(self, target: Subset) -> np.ndarray:
        p = positions(self.indices, target)
        return self.covariance[np.ix_(p, p)]

    def group_cost(self, group: Iterable[int]) -> float:
        p = positions(self.indices, subset(group))
        return float(self.mean_costs[p].sum())


@dataclass(frozen=True)
class SampleAllocation:
    """Per-group sample counts ``m_T``; keys are canonical subsets."""

    counts: Mapping[Subset, float]

    def __post_init__(self):
        clean = {}
        for key, value in self.counts.items():
            key = subset(key)
            if not key:
                raise ValueError("groups must be nonempty")
            value = float(value)
            if value < 0 or not math.isfinite(value):
                raise ValueError(f"invalid count {value} for group {key}")
            clean[key] = value
        object.__setattr__(self, "counts", dict(sorted(clean.items(), key=lambda kv: (len(kv[0]), kv[0]))))

    @property
    def groups(self) -> list[Subset]:
        return list(self.counts)

    def positive(self) -> dict[Subset, float]:
        return {T: m for T, m in self.counts.items() if m > 0}

    def coverage(self) -> Subset:
        return subset(i for T in self.positive() for i in T)

    def is_integer(self) -> bool:
        return all(float(m).is_integer() for m in self.counts.values())

    def cost(self, model_costs: Mapping[int, float] | MomentSet) -> float:
        if isinstance(model_costs, MomentSet):
            return math.fsum(model_costs.group_cost(T) * m for T, m in self.counts.items())
        return math.fsum(sum(model_costs[i] for i in T) * m for T, m in self.counts.items())

    def __getitem__(self, group: Iterable[int]) -> float:
        return self.counts.get(subset(group), 0.0)

    def as_ints(self) -> dict[Subset, int]:
        return {T: int(m) for T, m in self.counts.items()}


@dataclass(frozen=True)
class ExplorationData:
    """``q`` joint draws of all models (columns 0..n) and their realised costs."""

    samples: np.ndarray
    costs: np.ndarray

    def __post_init__(self):
        samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        costs = np.atleast_2d(np.asarray(self.costs, dtype=float))
        if samples.shape != costs.shape:
            raise DimensionMismatch(f"samples {samples.shape} vs costs {costs.shape}")
        samples.setflags(write=False)
        costs.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "costs", costs)

    @property
    def q(self) -> int:
        return self.samples.shape[0]

    @property
    def n(self) -> int:
        return self.samples.shape[1] - 1

    def head(self, q: int) -> "ExplorationData":
        return ExplorationData(self.samples[:q], self.costs[:q])

    def append(self, other: "ExplorationData") -> "ExplorationData":
        return ExplorationData(
            np.vstack([self.samples, other.samples]), np.vstack([self.costs, other.costs])
        )

    def total_cost(self) -> float:
        return math.fsum(self.costs.ravel())


@dataclass
class EstimatorReport:
    """Final estimate and the bookkeeping needed to audit it."""

    estimate: float
    chosen_subset: Subset
    exploration_count: int
    allocation: SampleAllocation
    exploration_cost: float
    exploitation_cost: float
    total_budget: float
    terminated_early: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def total_cost(self) -> float:
        return self.exploration_cost + self.exploitation_cost
