"""Exploration-phase statistics: least squares of Q_0 on Q_S, sample moments and costs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import (
    COND_LIMIT,
    ExplorationData,
    InsufficientSamples,
    MomentSet,
    RankDeficient,
    SingularMatrix,
    Subset,
    subset,
)


@dataclass(frozen=True)
class RegressionFit:
    subset: Subset
    intercept: float
    coefficients: np.ndarray
    residual_variance: float
    q: int

    @property
    def beta(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.coefficients])

    def predict_mean(self, mu_S) -> float:
        """Plug-in estimate ``a + mu_S @ b`` of the high-fidelity mean."""
        return float(self.intercept + np.dot(np.asarray(mu_S, dtype=float), self.coefficients))


def fit_linear_model(data: ExplorationData, S) -> RegressionFit:
    """Least-squares fit of ``Q_0 = a + Q_S @ b + eps`` on the exploration rows.

    The residual variance uses the ``q - |S| - 1`` denominator.

    Raises
    ------
    InsufficientSamples
        If ``q < |S| + 2``.
    RankDeficient
        If the design ``[1, Q_S]`` has condition number of its Gram matrix above 1e12.
    """
    S = subset(S)
    if not S or S[0] < 1 or S[-1] > data.n:
        raise ValueError(f"S must be a nonempty subset of 1..{data.n}, got {S}")
    q, s = data.q, len(S)
    if q < s + 2:
        raise InsufficientSamples(f"need q >= {s + 2} samples for |S|={s}, have {q}")
    Z = np.column_stack([np.ones(q), data.samples[:, list(S)]])
    y = data.samples[:, 0]
    Qm, Rm = np.linalg.qr(Z)
    sv = np.linalg.svd(Rm, compute_uv=False)
    if sv[-1] == 0 or (sv[0] / sv[-1]) ** 2 > COND_LIMIT:
        raise RankDeficient(f"design for S={S} is numerically rank deficient")
    beta = linalg.solve_triangular(Rm, Qm.T @ y)
    resid = y - Z @ beta
    sigma2 = float(resid @ resid) / (q - s - 1)
    return RegressionFit(S, float(beta[0]), beta[1:].copy(), sigma2, q)


def empirical_moments(data: ExplorationData, S=None) -> MomentSet:
    """Sample means, covariance (divisor q-1) and mean realised costs on ``S``.

    ``S`` defaults to every model, ``0..n``.
    """
    if data.q < 2:
        raise InsufficientSamples("need at least two rows for a sample covariance")
    S = tuple(range(data.n + 1)) if S is None else subset(S)
    cols = list(S)
    X = data.samples[:, cols]
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    cov = 0.5 * (cov + cov.T)
    return MomentSet(S, X.mean(axis=0), cov, data.costs[:, cols].mean(axis=0))


def schur_trace_identity(y_S, Pi_S) -> float:
    """``tr(y y^T Pi^{-1})`` for ``y = (1, mu)`` and second-moment matrix ``Pi = E[Y Y^T]``.

    Equals one whenever ``Pi`` comes from a mean ``mu`` and a positive
    definite covariance.
    """
    y = np.asarray(y_S, dtype=float).reshape(-1)
    Pi = np.atleast_2d(np.asarray(Pi_S, dtype=float))
    if Pi.shape != (y.size, y.size):
        raise ValueError(f"Pi has shape {Pi.shape}, expected {(y.size, y.size)}")
    if np.linalg.cond(Pi) > COND_LIMIT:
        raise SingularMatrix("second-moment matrix is not invertible")
    # tr(y y^T Pi^{-1}) = y^T Pi^{-1} y
    return float(y @ np.linalg.solve(Pi, y))


def second_moment_matrix(mu_S, Sigma_S) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(y_S, Pi_S)`` built from a mean vector and covariance."""
    mu = np.asarray(mu_S, dtype=float).reshape(-1)
    Sigma = np.atleast_2d(np.asarray(Sigma_S, dtype=float))
    y = np.concatenate([[1.0], mu])
    Pi = np.outer(y, y)
    Pi[1:, 1:] += Sigma
    return y, Pi
