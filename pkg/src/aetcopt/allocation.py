"""Optimal sample allocation for MLBLUE sketches.

The continuous problem

    minimise   f(m) = a^T Psi(m)^{-1} a,   Psi(m) = sum_T m_T R_T^T Sigma_T^{-1} R_T
    subject to sum_T c_T m_T = B,  m >= 0

is convex. We solve it in budget fractions ``x_T = c_T m_T / B`` (a point on
the probability simplex) with a spectral projected-gradient method and a
non-monotone Armijo line search. ``f`` is homogeneous of degree -1 in ``m``,
so the optimum at budget ``B`` is the unit-budget optimum divided by ``B``.

Groups with zero weight may leave some models unsampled. The objective stays
finite as long as the sketch does not touch those models, and the gradient
with respect to such a group uses the marginal precision of the part of the
group that is already sampled (the one-sided derivative).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import linalg

from .core import (
    COND_LIMIT,
    DimensionMismatch,
    Infeasible,
    MomentSet,
    NumericalFailure,
    SampleAllocation,
    SingularGroupCovariance,
    Subset,
    positions,
    powerset,
    subset,
)
from .mlblue import clip_psd, group_precision
from .regression import RegressionFit


class DegenerateSketchWarning(UserWarning):
    """The sketch is zero, so every allocation has zero variance."""


@dataclass(frozen=True)
class GroupFamily:
    groups: tuple[Subset, ...]
    universe: Subset

    def __init__(self, groups: Iterable[Iterable[int]], universe: Iterable[int] | None = None):
        gs = []
        for g in groups:
            g = subset(g)
            if not g:
                raise ValueError("groups must be nonempty")
            if g not in gs:
                gs.append(g)
        if not gs:
            raise ValueError("a group family needs at least one group")
        uni = subset(i for g in gs for i in g) if universe is None else subset(universe)
        for g in gs:
            if not set(g) <= set(uni):
                raise ValueError(f"group {g} is outside the universe {uni}")
        if len(gs) > 2 ** len(uni) - 1:
            raise ValueError("too many groups for this universe")
        object.__setattr__(self, "groups", tuple(gs))
        object.__setattr__(self, "universe", uni)

    @classmethod
    def all_subsets(cls, universe: Iterable[int]) -> "GroupFamily":
        uni = subset(universe)
        return cls(powerset(uni), uni)

    def __len__(self):
        return len(self.groups)


@dataclass
class AllocationSolution:
    allocation: SampleAllocation
    objective: float
    kkt_residual: float
    iterations: int
    fractions: np.ndarray = field(repr=False, default=None)


def group_costs(family: GroupFamily, costs) -> np.ndarray:
    """Cost of one joint draw of each group, given per-model costs.

    ``costs`` may be a mapping from model index, a MomentSet, or a sequence
    aligned with ``family.universe``.
    """
    lookup = _cost_lookup(costs, family.universe)
    return np.array([math.fsum(lookup[i] for i in g) for g in family.groups])


def _cost_lookup(costs, universe: Subset) -> Mapping[int, float]:
    if isinstance(costs, MomentSet):
        return {i: float(c) for i, c in zip(costs.indices, costs.mean_costs)}
    if isinstance(costs, Mapping):
        return {int(k): float(v) for k, v in costs.items()}
    arr = np.asarray(costs, dtype=float).reshape(-1)
    if arr.size != len(universe):
        raise DimensionMismatch(f"{arr.size} costs for universe of size {len(universe)}")
    return dict(zip(universe, arr.tolist()))


def project_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum(x) = 1}`` (sort-based)."""
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, y.size + 1)
    hits = np.nonzero(u - css / ind > 0)[0]
    # no hit only through cancellation when y spans many orders of magnitude; the top vertex is then exact
    rho = hits[-1] if hits.size else 0
    theta = css[rho] / (rho + 1.0)
    return np.maximum(y - theta, 0.0)


class _SketchProblem:
    """Unit-budget objective and gradient in budget fractions."""

    def __init__(self, family: GroupFamily, cov: np.ndarray, sketch: np.ndarray, gcost: np.ndarray):
        self.family = family
        self.cov = cov
        self.sketch = sketch
        self.gcost = gcost
        k = len(family.universe)
        self.k = k
        self.pos = [positions(family.universe, g) for g in family.groups]
        self.masks = np.zeros((len(family), k), dtype=bool)
        E = np.zeros((len(family), k, k))
        for j, p in enumerate(self.pos):
            self.masks[j, p] = True
            E[j][np.ix_(p, p)] = group_precision(cov[np.ix_(p, p)], family.groups[j])
        self.E = E
        self.support = np.abs(sketch) > 0
        self._marginal: dict = {}

    def _marginal_precision(self, j: int, covered: np.ndarray):
        key = (j, covered.tobytes())
        if key not in self._marginal:
            p = [i for i in self.pos[j] if covered[i]]
            if not p:
                self._marginal[key] = (p, None)
            else:
                sub = self.cov[np.ix_(p, p)]
                self._marginal[key] = (p, np.linalg.inv(sub))
        return self._marginal[key]

    def value(self, x: np.ndarray):
        """Return ``(f, v, covered)`` with ``v = Psi^+ a``; ``f = inf`` if the sketch is not estimable."""
        active = x > 0
        covered = self.masks[active].any(axis=0)
        if np.any(self.support & ~covered):
            return math.inf, None, covered
        w = x / self.gcost
        Psi = np.tensordot(w, self.E, axes=1)
        if covered.all():
            Pc = Psi
            ac = self.sketch
        else:
            idx = np.nonzero(covered)[0]
            Pc = Psi[np.ix_(idx, idx)]
            ac = self.sketch[idx]
        try:
            cf = linalg.cho_factor(Pc, check_finite=False)
        except linalg.LinAlgError:
            return math.inf, None, covered
        d = np.diag(cf[0])
        if d.min() <= 0 or (d.max() / d.min()) ** 2 > 1e14:
            return math.inf, None, covered
        vc = linalg.cho_solve(cf, ac, check_finite=False)
        v = np.zeros(self.k)
        v[covered] = vc
        return float(ac @ vc), v, covered

    def gradient(self, v: np.ndarray, covered: np.ndarray) -> np.ndarray:
        if covered.all():
            quad = np.einsum("gij,i,j->g", self.E, v, v)
        else:
            quad = np.empty(len(self.family))
            for j in range(len(self.family)):
                if self.masks[j][covered].sum() == self.masks[j].sum():
                    quad[j] = v @ self.E[j] @ v
                else:
                    p, P = self._marginal_precision(j, covered)
                    quad[j] = 0.0 if P is None else v[p] @ P @ v[p]
        return -quad / self.gcost


def _spg(problem: _SketchProblem, x0: np.ndarray, tol: float, max_iter: int):
    """Spectral projected gradient; returns ``(x, f, residual, iterations)``."""
    x = project_simplex(x0)
    f, v, cov = problem.value(x)
    if not math.isfinite(f):
        x = np.full(x.size, 1.0 / x.size)
        f, v, cov = problem.value(x)
        if not math.isfinite(f):
            raise Infeasible("no allocation over this family can estimate the sketch")
    if f == 0.0:
        return x, 0.0, 0.0, 0
    g = problem.gradient(v, cov)
    history = [f]
    lam = 1.0 / max(np.abs(g).max(), 1e-300)
    lam_min, lam_max = 1e-30, 1e30
    it = 0
    residual = math.inf
    while it < max_iter:
        residual = float(np.abs(x - project_simplex(x - g / f)).max())
        if residual <= tol:
            break
        it += 1
        d = project_simplex(x - lam * g) - x
        gd = float(g @ d)
        if gd >= 0:
            # numerical stall: the projected direction is no longer a descent direction
            lam = 1.0 / max(np.abs(g).max(), 1e-300)
            d = project_simplex(x - lam * g) - x
            gd = float(g @ d)
            if gd >= 0:
                break
        fref = max(history[-10:])
        t = 1.0
        while True:
            x_new = x + t * d
            x_new[x_new < 1e-13] = 0.0
            f_new, v_new, cov_new = problem.value(x_new)
            if f_new <= fref + 1e-4 * t * gd:
                break
            t *= 0.5
            if t < 1e-20:
                break
        if not math.isfinite(f_new) or t < 1e-20:
            break
        g_new = problem.gradient(v_new, cov_new)
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        lam = min(lam_max, max(lam_min, float(s @ s) / sy)) if sy > 0 else lam_max
        x, f, v, cov, g = x_new, f_new, v_new, cov_new, g_new
        history.append(f)
    return x, f, residual, it


def solve_allocation(
    family: GroupFamily,
    moments: MomentSet,
    sketch,
    costs=None,
    budget: float = 1.0,
    *,
    tol: float = 1e-7,
    max_iter: int = 100_000,
    x0: np.ndarray | None = None,
) -> AllocationSolution:
    """Continuous allocation minimising the variance of ``sketch @ mu_hat`` under a budget.

    Parameters
    ----------
    family : GroupFamily
        Admissible groups; its universe must be contained in ``moments.indices``.
    moments : MomentSet
        Supplies the covariance (and, if ``costs`` is None, the per-model costs).
    sketch : array_like
        Linear functional on ``family.universe``.
    costs : optional
        Per-model costs (mapping, MomentSet or sequence aligned with the universe).
    budget : float
        Total budget ``B``; the optimum scales as ``1/B``.
    tol : float
        Stop when the projected-gradient residual of the objective, measured
        relative to the objective, drops below ``tol``.
    x0 : array_like, optional
        Warm start in budget fractions (one entry per group).
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    a = np.asarray(sketch, dtype=float).reshape(-1)
    uni = family.universe
    if a.size != len(uni):
        raise DimensionMismatch(f"sketch has {a.size} entries, universe has {len(uni)}")
    if not np.any(a):
        raise ValueError("sketch must be nonzero")
    cov = moments.cov_block(uni)
    gcost = group_costs(family, moments if costs is None else costs)
    if np.any(gcost <= 0):
        raise ValueError("group costs must be positive")
    problem = _SketchProblem(family, cov, a, gcost)
    start = np.full(len(family), 1.0 / len(family)) if x0 is None else np.asarray(x0, dtype=float)
    x, f1, residual, iters = _spg(problem, start, tol, max_iter)
    if residual > tol:
        if residual > 1e3 * tol or iters >= max_iter:
            raise NumericalFailure(
                f"allocation solver stalled with relative KKT residual {residual:.2e} after {iters} iterations"
            )
        warnings.warn(f"allocation solver stopped at relative KKT residual {residual:.2e}", stacklevel=2)
    x = np.where(x < 1e-12, 0.0, x)
    x = x / x.sum()
    f1_clean, _, _ = problem.value(x)
    if math.isfinite(f1_clean):
        f1 = f1_clean
    m = budget * x / gcost
    alloc = SampleAllocation(dict(zip(family.groups, m)))
    return AllocationSolution(alloc, f1 / budget, residual, iters, x)


def _S_moments(S: Subset, moments: MomentSet, costs) -> tuple[np.ndarray, Mapping[int, float]]:
    cov = moments.cov_block(S)
    lookup = _cost_lookup(moments if costs is None else costs, S)
    return cov, lookup


def gamma_of_S(S, b_S, moments: MomentSet, costs=None, *, x0=None, return_solution=False):
    """Unit-budget optimal sketch variance of ``b_S`` over all groups ``T`` inside ``S``.

    A zero sketch gives 0 and a DegenerateSketchWarning.
    """
    S = subset(S)
    b = np.asarray(b_S, dtype=float).reshape(-1)
    if b.size != len(S):
        raise DimensionMismatch(f"b_S has {b.size} entries for |S|={len(S)}")
    cov, lookup = _S_moments(S, moments, costs)
    if not np.any(b):
        warnings.warn(f"zero sketch for S={S}; gamma set to 0", DegenerateSketchWarning, stacklevel=2)
        return (0.0, None) if return_solution else 0.0
    if len(S) == 1:
        if cov[0, 0] <= 0 or cov[0, 0] / max(abs(cov[0, 0]), 1e-300) < 1 / COND_LIMIT:
            raise SingularGroupCovariance(f"zero variance for model {S[0]}")
        g = float(b[0] ** 2 * cov[0, 0] * lookup[S[0]])
        if return_solution:
            sol = AllocationSolution(SampleAllocation({S: 1.0 / lookup[S[0]]}), g, 0.0, 0, np.ones(1))
            return g, sol
        return g
    family = GroupFamily.all_subsets(S)
    mom = MomentSet(S, np.zeros(len(S)), cov, [lookup[i] for i in S])
    sol = solve_allocation(family, mom, b, None, 1.0, x0=x0)
    return (sol.objective, sol) if return_solution else sol.objective


def gamma_hat(S, fit: RegressionFit, empirical: MomentSet, **kwargs):
    """Plug-in estimate of gamma(S) from exploration: fitted coefficients, sample covariance and costs."""
    S = subset(S)
    if subset(fit.subset) != S:
        raise ValueError(f"fit is for {fit.subset}, not {S}")
    emp = empirical.restrict(S)
    cov = clip_psd(emp.covariance)
    mom = MomentSet(S, emp.means, cov, emp.mean_costs)
    return gamma_of_S(S, fit.coefficients, mom, None, **kwargs)


def gamma_uniform(S, b_S, Sigma_S, c_S: float) -> float:
    """Unit-budget variance of ``b_S @ mu_hat`` when every draw samples all of ``S`` jointly."""
    b = np.asarray(b_S, dtype=float).reshape(-1)
    Sig = np.atleast_2d(np.asarray(Sigma_S, dtype=float))
    if Sig.shape != (b.size, b.size) or (S is not None and len(subset(S)) != b.size):
        raise DimensionMismatch("b_S and Sigma_S dimensions disagree")
    if c_S <= 0:
        raise ValueError("c_S must be positive")
    return float(c_S * (b @ Sig @ b))


def round_allocation(
    continuous: SampleAllocation,
    costs,
    budget: float,
    universe: Iterable[int] | None = None,
) -> SampleAllocation:
    """Round every ``m_T`` down; if that leaves a model unsampled, add single draws of the cheapest groups that fix it.

    Raises Infeasible when the repair does not fit in the budget.
    """
    groups = continuous.groups
    uni = subset(i for g in groups for i in g) if universe is None else subset(universe)
    lookup = _cost_lookup(costs, uni)
    gcost = {g: math.fsum(lookup[i] for i in g) for g in groups}
    counts = {g: math.floor(m) for g, m in continuous.counts.items()}
    spent = math.fsum(gcost[g] * c for g, c in counts.items())
    covered = {i for g, c in counts.items() if c > 0 for i in g}
    while not set(uni) <= covered:
        missing = set(uni) - covered
        # cheapest cost per newly covered model; ties -> larger coverage, then order
        best = min(
            (g for g in groups if set(g) & missing),
            key=lambda g: (gcost[g] / len(set(g) & missing), -len(set(g) & missing), len(g), g),
            default=None,
        )
        if best is None:
            raise Infeasible(f"no group samples models {sorted(missing)}")
        if spent + gcost[best] > budget * (1 + 1e-12):
            raise Infeasible(
                f"budget {budget} cannot cover models {sorted(missing)} (need {spent + gcost[best]})"
            )
        counts[best] += 1
        spent += gcost[best]
        covered |= set(best)
    return SampleAllocation(counts)
