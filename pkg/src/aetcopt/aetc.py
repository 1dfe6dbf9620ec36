"""Adaptive explore-then-commit estimation of a high-fidelity mean.

The exploration phase draws joint samples of every model and fits
``Q_0 = a_S + b_S @ Q_S + eps`` for each candidate subset ``S``. For a total
budget ``B`` and per-draw exploration cost ``c_r`` the asymptotic MSE of
exploiting ``S`` after ``z`` exploration draws is

    L_S(z) = k(S) / z + gamma(S) / (B - c_r z),

where ``k(S)`` is the residual variance and ``gamma(S)`` the unit-budget
variance of the exploitation estimator of ``b_S @ mu_S``. The loop grows the
exploration set (doubling, or bisecting toward the estimated optimum) until
the estimated optimum no longer exceeds the current count, then spends the
rest of the budget on an MLBLUE of the selected low-fidelity means.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .allocation import GroupFamily, gamma_of_S, gamma_uniform, round_allocation, solve_allocation
from .core import (
    DegenerateLoss,
    EstimatorReport,
    ExplorationData,
    Infeasible,
    InadmissibleSubset,
    InsufficientSamples,
    MomentSet,
    OutOfDomain,
    RankDeficient,
    SampleAllocation,
    SingularMatrix,
    Subset,
    enumerate_subsets,
    subset,
)
from .mlblue import GroupedSamples, blue_estimate, clip_psd
from .regression import RegressionFit, empirical_moments, fit_linear_model


@dataclass(frozen=True)
class LossProfile:
    k: float
    gamma: float
    c_r: float
    budget: float

    def __post_init__(self):
        if self.k < 0 or self.gamma < 0:
            raise ValueError("k and gamma must be nonnegative")
        if self.c_r <= 0 or self.budget <= 0:
            raise ValueError("c_r and budget must be positive")

    @property
    def max_exploration(self) -> float:
        return self.budget / self.c_r


class ExploitationPolicy(enum.Enum):
    OPTIMAL_BLUE = "optimal_blue"
    UNIFORM_MC = "uniform_mc"


class CovarianceSource(enum.Enum):
    ORACLE = "oracle"
    EMPIRICAL = "empirical"


@dataclass(frozen=True)
class PolicyChoice:
    exploitation_policy: ExploitationPolicy = ExploitationPolicy.OPTIMAL_BLUE
    covariance_source: CovarianceSource = CovarianceSource.ORACLE


AETC = PolicyChoice(ExploitationPolicy.UNIFORM_MC, CovarianceSource.ORACLE)
AETC_OPT = PolicyChoice(ExploitationPolicy.OPTIMAL_BLUE, CovarianceSource.ORACLE)
AETC_OPT_E = PolicyChoice(ExploitationPolicy.OPTIMAL_BLUE, CovarianceSource.EMPIRICAL)


def geometric_alpha(base: float = 4.0) -> Callable[[int], float]:
    """Regulariser schedule ``q -> base**(-q)``."""

    def alpha(q: int) -> float:
        return base ** (-q)

    return alpha


def loss(profile: LossProfile, z: float) -> float:
    """Asymptotic MSE after ``z`` exploration draws."""
    if not 0 < z < profile.max_exploration:
        raise OutOfDomain(f"z={z} outside (0, {profile.max_exploration})")
    explore = profile.k / z
    if profile.gamma == 0:
        return explore
    return explore + profile.gamma / (profile.budget - profile.c_r * z)


def optimal_exploration(profile: LossProfile) -> float:
    """Minimiser ``B / (c_r + sqrt(c_r gamma / k))`` of the loss.

    Raises DegenerateLoss when ``k`` or ``gamma`` is zero; the exception's
    ``boundary`` attribute holds the limiting policy (0 when ``k == 0``,
    ``B / c_r`` when ``gamma == 0``).
    """
    k, gamma, c_r, B = profile.k, profile.gamma, profile.c_r, profile.budget
    if k == 0 or gamma == 0:
        err = DegenerateLoss("k == 0" if k == 0 else "gamma == 0")
        err.boundary = 0.0 if k == 0 else B / c_r
        raise err
    return B / (c_r + math.sqrt(c_r * gamma / k))


def optimal_loss(profile: LossProfile) -> float:
    """Minimum of the loss, ``(sqrt(c_r k) + sqrt(gamma))**2 / B``; also the boundary limit when k or gamma is 0."""
    return (math.sqrt(profile.c_r * profile.k) + math.sqrt(profile.gamma)) ** 2 / profile.budget


@dataclass(frozen=True)
class Regret:
    subset: Subset
    regret: float
    q_star_hat: float
    k_hat: float
    gamma_hat: float
    fit: RegressionFit
    c_r_hat: float


def _exploitation_moments(S: Subset, policy: PolicyChoice, empirical: MomentSet, oracle: MomentSet | None) -> MomentSet:
    if policy.covariance_source is CovarianceSource.ORACLE:
        if oracle is None:
            raise ValueError("oracle covariance requested but the ensemble has none")
        return oracle.restrict(S)
    emp = empirical.restrict(S)
    return MomentSet(S, emp.means, clip_psd(emp.covariance), emp.mean_costs)


def estimated_regret(
    S,
    q: int,
    data: ExplorationData,
    policy: PolicyChoice,
    budget: float,
    alpha: float,
    *,
    oracle: MomentSet | None = None,
    empirical: MomentSet | None = None,
    warm_starts: dict | None = None,
) -> Regret:
    """Estimated optimal loss of exploiting ``S`` after ``q`` exploration draws.

    The loss is evaluated at ``max(q_star_hat, q)``: exploration already spent
    cannot be undone.

    Raises
    ------
    InadmissibleSubset
        When the regression or a group covariance is singular for this data.
    """
    S = subset(S)
    if data.q != q:
        raise ValueError(f"q={q} does not match data with {data.q} rows")
    try:
        fit = fit_linear_model(data, S)
    except (RankDeficient, InsufficientSamples) as err:
        raise InadmissibleSubset(str(err)) from err
    if empirical is None:
        empirical = empirical_moments(data)
    mom = _exploitation_moments(S, policy, empirical, oracle)
    k_hat = fit.residual_variance + alpha
    try:
        if policy.exploitation_policy is ExploitationPolicy.UNIFORM_MC:
            g_hat = gamma_uniform(S, fit.coefficients, mom.covariance, float(mom.mean_costs.sum()))
        else:
            x0 = None if warm_starts is None else warm_starts.get(S)
            g_hat, sol = gamma_of_S(S, fit.coefficients, mom, x0=x0, return_solution=True)
            if warm_starts is not None and sol is not None:
                warm_starts[S] = sol.fractions
    except SingularMatrix as err:
        raise InadmissibleSubset(str(err)) from err
    c_r_hat = float(data.costs.sum(axis=1).mean())
    profile = LossProfile(k_hat, g_hat, c_r_hat, budget)
    try:
        q_star = optimal_exploration(profile)
    except DegenerateLoss as err:
        q_star = err.boundary
    z = max(q_star, float(q))
    if g_hat == 0 and z >= profile.max_exploration:
        regret = c_r_hat * k_hat / budget if z == profile.max_exploration else math.inf
    else:
        try:
            regret = loss(profile, z)
        except OutOfDomain:
            regret = math.inf
    return Regret(S, regret, q_star, k_hat, g_hat, fit, c_r_hat)


def draw_within_budget(ensemble, T: Subset, count: int, rng, remaining: float):
    """Draw up to ``count`` joint samples of ``T``, stopping before the realised cost would exceed ``remaining``."""
    if count <= 0:
        return np.empty((0, len(T))), 0.0
    W = ensemble.draw_group(T, count, rng)
    c = ensemble.draw_costs(T, count, rng)
    keep = count
    if math.fsum(c) > remaining:
        keep = int(np.searchsorted(np.cumsum(c), remaining, side="right"))
        while keep > 0 and math.fsum(c[:keep]) > remaining:
            keep -= 1
    return W[:keep], math.fsum(c[:keep])


def draw_allocation(ensemble, alloc: SampleAllocation, rng, remaining: float):
    """Draw fresh grouped samples for ``alloc`` in group order, stopping at the first group that overruns ``remaining``.

    Returns ``(samples, realised_allocation, cost, truncated)``.
    """
    samples = GroupedSamples()
    drawn = {}
    cost = 0.0
    truncated = False
    for T, m in alloc.positive().items():
        if truncated:
            break
        m = int(m)
        W, c = draw_within_budget(ensemble, T, m, rng, remaining - cost)
        cost += c
        truncated = W.shape[0] < m
        if W.shape[0]:
            samples[T] = W
            drawn[T] = W.shape[0]
    return samples, SampleAllocation(drawn), cost, truncated


def run_aetc(
    ensemble,
    budget: float,
    policy: PolicyChoice = AETC_OPT,
    max_subset_size: int | None = None,
    seed: int | None = None,
    *,
    rng: np.random.Generator | None = None,
    alpha: Callable[[int], float] | None = None,
    subset_pool: Iterable[Iterable[int]] | None = None,
) -> EstimatorReport:
    """Run the adaptive explore-then-commit loop and return the final estimate with its bookkeeping.

    ``ensemble`` must provide ``n``, ``draw_joint(count, rng)``,
    ``draw_group(T, count, rng)``, ``draw_costs(T, count, rng)`` and, for the
    oracle covariance source, ``moments()``.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    alpha = alpha or geometric_alpha(4.0)
    n = ensemble.n
    if subset_pool is None:
        pool = enumerate_subsets(n, max_subset_size)
    else:
        pool = sorted({subset(S) for S in subset_pool}, key=lambda S: (len(S), S))
    oracle = ensemble.moments() if policy.covariance_source is CovarianceSource.ORACLE else None
    if policy.covariance_source is CovarianceSource.ORACLE and oracle is None:
        raise ValueError("this ensemble has no oracle moments")

    q = n + 2
    data = ensemble.draw_joint(q, rng)
    spent = data.total_cost()
    if spent > budget:
        raise Infeasible(f"budget {budget} cannot pay for {q} exploration draws")
    c_r_hat = spent / q
    max_rounds = math.floor(budget / c_r_hat)

    warm: dict = {}
    history = []
    exploration_truncated = False
    best: Regret | None = None
    while True:
        empirical = empirical_moments(data)
        a_q = alpha(q)
        best = None
        for S in pool:
            try:
                r = estimated_regret(
                    S, q, data, policy, budget, a_q, oracle=oracle, empirical=empirical, warm_starts=warm
                )
            except InadmissibleSubset:
                continue
            if best is None or (r.regret, len(r.subset), r.subset) < (best.regret, len(best.subset), best.subset):
                best = r
        history.append((q, None if best is None else best.subset, None if best is None else best.q_star_hat))
        if best is None:
            target = 2 * q
        elif best.q_star_hat > 2 * q:
            target = 2 * q
        elif best.q_star_hat > q:
            target = math.ceil((q + best.q_star_hat) / 2)
        else:
            break
        if target > max_rounds:
            exploration_truncated = True
            break
        extra = ensemble.draw_joint(target - q, rng)
        extra_cost = extra.total_cost()
        if spent + extra_cost > budget:
            exploration_truncated = True
            break
        data = data.append(extra)
        spent += extra_cost
        q = target
        c_r_hat = float(data.costs.sum(axis=1).mean())
        max_rounds = math.floor(budget / c_r_hat)

    diagnostics = {
        "rounds": len(history),
        "c_r_hat": c_r_hat,
        "exploration_truncated": exploration_truncated,
    }
    if best is None:
        # no subset could be scored: fall back to the exploration sample mean of Q_0
        diagnostics["fallback"] = "exploration_mean"
        return EstimatorReport(
            float(data.samples[:, 0].mean()), (), q, SampleAllocation({}), spent, 0.0, budget, True, diagnostics
        )

    S = best.subset
    fit = best.fit
    diagnostics.update(
        k_hat=best.k_hat,
        gamma_hat=best.gamma_hat,
        q_star_hat=best.q_star_hat,
        predicted_loss=best.regret,
    )
    remaining = budget - spent
    empirical = empirical_moments(data)
    mom = _exploitation_moments(S, policy, empirical, oracle)
    c_S = float(mom.mean_costs.sum())

    try:
        if policy.exploitation_policy is ExploitationPolicy.UNIFORM_MC or not np.any(fit.coefficients):
            m = math.floor(remaining / c_S)
            if m < 1:
                raise Infeasible("remaining budget cannot pay for one exploitation draw")
            alloc = SampleAllocation({S: m})
        else:
            sol = solve_allocation(GroupFamily.all_subsets(S), mom, fit.coefficients, None, remaining, x0=warm.get(S))
            alloc = round_allocation(sol.allocation, mom, remaining, S)
    except Infeasible:
        diagnostics["fallback"] = "exploration_means"
        mu_bar_S = data.samples[:, list(S)].mean(axis=0)
        return EstimatorReport(
            fit.predict_mean(mu_bar_S), S, q, SampleAllocation({}), spent, 0.0, budget, True, diagnostics
        )

    samples, realised, exploit_cost, stopped = draw_allocation(ensemble, alloc, rng, remaining)
    drawn = realised.counts
    if set(realised.coverage()) != set(S):
        diagnostics["fallback"] = "exploration_means"
        mu_bar_S = data.samples[:, list(S)].mean(axis=0)
        return EstimatorReport(
            fit.predict_mean(mu_bar_S), S, q, realised, spent, exploit_cost, budget, True, diagnostics
        )
    if len(drawn) == 1:
        # single group: the MLBLUE is the plain sample mean, no covariance needed
        mu_hat = samples[S].mean(axis=0)
    else:
        mu_hat = blue_estimate(mom, realised, samples)
    diagnostics["exploitation_truncated"] = stopped
    return EstimatorReport(
        fit.predict_mean(mu_hat), S, q, realised, spent, exploit_cost, budget, False, diagnostics
    )
