"""Multilevel best linear unbiased estimators (MLBLUEs) of a vector of model means.

Samples arrive in groups: group ``T`` holds ``m_T`` independent joint draws
of the models in ``T``. The estimator is the generalised least-squares
solution of the stacked system ``W = R mu + xi`` with block-diagonal noise,
which collapses to

    Psi = sum_T m_T R_T^T Sigma_T^{-1} R_T,
    mu_hat = Psi^{-1} sum_T R_T^T Sigma_T^{-1} sum_l W_{T,l}.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import linalg

from .core import (
    COND_LIMIT,
    DimensionMismatch,
    ExplorationData,
    MomentSet,
    SampleAllocation,
    SingularGroupCovariance,
    SingularNormalMatrix,
    Subset,
    positions,
    subset,
)
from .regression import RegressionFit


class GroupedSamples(dict):
    """Map from group ``T`` to an ``m_T x |T|`` array of joint draws (columns in ascending index order).

    Arrays may carry leading batch axes, ``(..., m_T, |T|)``, to hold many
    independent replications at once; estimates then carry the same axes.
    """

    def __init__(self, data: Mapping | None = None):
        super().__init__()
        for T, W in (data or {}).items():
            T = subset(T)
            W = np.asarray(W, dtype=float)
            if W.ndim < 2:
                W = W.reshape(-1, len(T))
            if W.shape[-1] != len(T):
                raise DimensionMismatch(f"group {T}: samples have {W.shape[-1]} columns")
            self[T] = W

    def counts(self) -> SampleAllocation:
        return SampleAllocation({T: W.shape[-2] for T, W in self.items()})


@dataclass(frozen=True)
class BlueSystem:
    universe: Subset
    normal_matrix: np.ndarray
    rhs: np.ndarray | None


def clip_psd(cov: np.ndarray) -> np.ndarray:
    """Symmetrise and clip negative eigenvalues to zero."""
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    if w.min() >= 0:
        return cov
    return (V * np.clip(w, 0, None)) @ V.T


def group_precision(cov_T: np.ndarray, T: Subset = ()) -> np.ndarray:
    """Inverse of a group covariance block, refusing ill-conditioned blocks."""
    cov_T = np.atleast_2d(cov_T)
    if np.linalg.cond(cov_T) > COND_LIMIT:
        raise SingularGroupCovariance(f"covariance of group {T} is numerically singular")
    c = linalg.cho_factor(cov_T)
    return linalg.cho_solve(c, np.eye(cov_T.shape[0]))


def blue_system(moments: MomentSet, alloc: SampleAllocation, samples: GroupedSamples | None = None) -> BlueSystem:
    """Assemble the normal matrix ``Psi`` and, when samples are given, the right-hand side."""
    universe = moments.indices
    k = len(universe)
    Psi = np.zeros((k, k))
    rhs = None
    for T, m in alloc.positive().items():
        p = positions(universe, T)
        prec = group_precision(moments.covariance[np.ix_(p, p)], T)
        Psi[np.ix_(p, p)] += m * prec
        if samples is not None:
            W = samples.get(T)
            if W is None or W.shape[-2] != int(m):
                got = None if W is None else W.shape[-2]
                raise DimensionMismatch(f"group {T}: allocation says {m} samples, got {got}")
            contrib = W.sum(axis=-2) @ prec
            if rhs is None:
                rhs = np.zeros(contrib.shape[:-1] + (k,))
            rhs[..., p] += contrib
    return BlueSystem(universe, Psi, rhs)


def _check_normal(system: BlueSystem, alloc: SampleAllocation) -> None:
    missing = set(system.universe) - set(alloc.coverage())
    if missing:
        raise SingularNormalMatrix(f"allocation does not sample models {sorted(missing)}")
    if np.linalg.cond(system.normal_matrix) > COND_LIMIT:
        raise SingularNormalMatrix("normal matrix is numerically singular")


def blue_estimate(moments: MomentSet, alloc: SampleAllocation, samples: GroupedSamples) -> np.ndarray:
    """MLBLUE of the means of ``moments.indices`` from grouped samples."""
    system = blue_system(moments, alloc, samples)
    _check_normal(system, alloc)
    rhs = system.rhs
    sol = linalg.solve(system.normal_matrix, rhs.reshape(-1, rhs.shape[-1]).T, assume_a="pos")
    return sol.T.reshape(rhs.shape)


def blue_covariance(moments: MomentSet, alloc: SampleAllocation) -> np.ndarray:
    system = blue_system(moments, alloc)
    _check_normal(system, alloc)
    return np.linalg.inv(system.normal_matrix)


def blue_sketch_variance(moments: MomentSet, alloc: SampleAllocation, a) -> float:
    """Variance ``a^T Psi^{-1} a`` of the sketch ``a @ mu_hat``; works for continuous allocations."""
    a = np.asarray(a, dtype=float).reshape(-1)
    system = blue_system(moments, alloc)
    if a.shape != (len(system.universe),):
        raise DimensionMismatch(f"sketch has length {a.size}, universe has {len(system.universe)}")
    _check_normal(system, alloc)
    return float(a @ linalg.solve(system.normal_matrix, a, assume_a="pos"))


def inner_product_variance(mean_x, cov_x, mean_y, cov_y) -> float:
    """``Var[X^T Y]`` for independent random vectors X and Y given their first two moments."""
    mx = np.asarray(mean_x, dtype=float).reshape(-1)
    my = np.asarray(mean_y, dtype=float).reshape(-1)
    Cx = np.atleast_2d(np.asarray(cov_x, dtype=float))
    Cy = np.atleast_2d(np.asarray(cov_y, dtype=float))
    d = mx.size
    if my.size != d or Cx.shape != (d, d) or Cy.shape != (d, d):
        raise DimensionMismatch("moment dimensions do not agree")
    return float(np.trace(Cy @ Cx) + my @ Cx @ my + mx @ Cy @ mx)


def lrmc_acv_identity_check(data: ExplorationData, fit: RegressionFit, mu_hat_S) -> float:
    """Absolute difference between the regression form and the control-variate form of the estimator.

    ``a + mu_hat @ b`` versus ``mean(Q_0) - b @ (mean(Q_S) - mu_hat)``; the two
    agree exactly because the intercept is ``mean(Q_0) - b @ mean(Q_S)``.
    """
    mu_hat = np.asarray(mu_hat_S, dtype=float).reshape(-1)
    cols = list(fit.subset)
    mu_bar_0 = data.samples[:, 0].mean()
    mu_bar_S = data.samples[:, cols].mean(axis=0)
    regression_form = fit.intercept + mu_hat @ fit.coefficients
    acv_form = mu_bar_0 - fit.coefficients @ (mu_bar_S - mu_hat)
    return float(abs(regression_form - acv_form))


@dataclass(frozen=True)
class GapReport:
    gap: float
    delta_norm: float
    mu_gap_norm: float
    blue_estimate: float
    lrmc_star: float
    delta_too_large: bool


def blue_vs_lrmcstar_gap(
    moments: MomentSet,
    q: int,
    S,
    alloc: SampleAllocation,
    samples: GroupedSamples,
    exploration: ExplorationData,
    b_S,
) -> GapReport:
    """Compare the MLBLUE of ``mu_0`` on exploration + exploitation samples with the idealised LRMC.

    ``moments`` must carry the oracle covariance of all models ``0..n``.
    The exploration rows enter the MLBLUE as ``q`` draws of the full group;
    the exploitation groups must lie inside ``S``.
    """
    S = subset(S)
    b_S = np.asarray(b_S, dtype=float).reshape(-1)
    universe = moments.indices
    if exploration.q != q:
        raise DimensionMismatch(f"q={q} but exploration has {exploration.q} rows")
    for T in alloc.positive():
        if not set(T) <= set(S):
            raise ValueError(f"exploitation group {T} is not inside S={S}")

    joint = dict(alloc.positive())
    joint[universe] = joint.get(universe, 0) + q
    joint_samples = GroupedSamples(samples)
    joint_samples[universe] = exploration.samples[:, list(universe)]
    mu_blue = blue_estimate(moments, SampleAllocation(joint), joint_samples)
    mu_blue_0 = float(mu_blue[positions(universe, (0,))[0]])

    mom_S = moments.restrict(S)
    mu_hat_S = blue_estimate(mom_S, alloc, samples)
    mu_bar = exploration.samples.mean(axis=0)
    mu_bar_S = mu_bar[list(S)]
    lrmc_star = float(mu_bar[0] - b_S @ (mu_bar_S - mu_hat_S))

    Xi = blue_system(mom_S, alloc).normal_matrix
    Delta = q * np.linalg.solve(Xi, np.linalg.inv(mom_S.covariance))
    delta_norm = float(np.linalg.norm(Delta, 2))
    too_large = delta_norm >= 0.5
    if too_large:
        warnings.warn(f"||Delta||_2 = {delta_norm:.3g} >= 1/2; the gap bound does not apply", stacklevel=2)
    return GapReport(
        gap=abs(mu_blue_0 - lrmc_star),
        delta_norm=delta_norm,
        mu_gap_norm=float(np.linalg.norm(mu_bar_S - mu_hat_S)),
        blue_estimate=mu_blue_0,
        lrmc_star=lrmc_star,
        delta_too_large=too_large,
    )
