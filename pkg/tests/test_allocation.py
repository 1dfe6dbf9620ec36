import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aetcopt import GaussianLinearEnsemble
from aetcopt.allocation import (
    DegenerateSketchWarning,
    GroupFamily,
    gamma_hat,
    gamma_of_S,
    gamma_uniform,
    project_simplex,
    round_allocation,
    solve_allocation,
)
from aetcopt.core import (
    Infeasible,
    MomentSet,
    NumericalFailure,
    SampleAllocation,
    SingularGroupCovariance,
    SingularMatrix,
)
from aetcopt.mlblue import blue_sketch_variance
from aetcopt.problems import linear_model_coefficients
from aetcopt.regression import empirical_moments, fit_linear_model

from conftest import random_spd
from oracles import grid_allocation_2lf


def _two_lf(rng, costs=(4.0, 1.0)):
    cov = random_spd(rng, 2, 0.05)
    return MomentSet((1, 2), np.zeros(2), cov, costs)


def test_group_family_validation():
    fam = GroupFamily([(1,), (2, 1), (1,)])
    assert fam.groups == ((1,), (1, 2)) and fam.universe == (1, 2)
    assert len(GroupFamily.all_subsets((0, 1, 2))) == 7
    with pytest.raises(ValueError):
        GroupFamily([(3,)], (1, 2))
    with pytest.raises(ValueError):
        GroupFamily([])


def test_single_group_closed_form():
    m = MomentSet((1,), [0.0], [[2.5]], [3.0])
    sol = solve_allocation(GroupFamily([(1,)]), m, [0.7])
    assert sol.allocation[(1,)] == pytest.approx(1 / 3)
    assert sol.objective == pytest.approx(0.7**2 * 2.5 * 3.0)
    m0 = MomentSet((0,), [0.0], [[4.0]], [5.0])
    assert solve_allocation(GroupFamily([(0,)]), m0, [1.0], budget=20).objective == pytest.approx(4 * 5 / 20)


def test_matches_grid_oracle(rng):
    for _ in range(5):
        m = _two_lf(rng)
        b = rng.normal(size=2)
        sol = solve_allocation(GroupFamily([(1,), (2,), (1, 2)]), m, b)
        ref = grid_allocation_2lf(m.covariance, m.mean_costs, b)
        assert sol.objective <= ref * (1 + 1e-9)
        assert sol.objective == pytest.approx(ref, rel=0.005)
        assert sol.kkt_residual <= 1e-7
        assert sol.allocation.cost(m) == pytest.approx(1.0, rel=1e-9)


def test_better_than_random_feasible_points(rng):
    fam = GroupFamily([(1,), (2,), (1, 2)])
    for _ in range(200):
        m = _two_lf(rng, rng.uniform(0.1, 5, size=2))
        b = rng.normal(size=2)
        sol = solve_allocation(fam, m, b)
        gcost = np.array([m.group_cost(g) for g in fam.groups])
        for x in rng.dirichlet(np.ones(3), size=50):
            alloc = SampleAllocation(dict(zip(fam.groups, x / gcost)))
            assert sol.objective <= blue_sketch_variance(m, alloc, b) * (1 + 1e-9)


def test_budget_scale_law(rng):
    Sigma = random_spd(rng, 4)
    m = MomentSet(range(4), np.zeros(4), Sigma, [20, 3, 1, 0.5])
    fam = GroupFamily.all_subsets(range(4))
    a = np.eye(4)[0]
    f1 = solve_allocation(fam, m, a).objective
    for B in (3.0, 1e3, 2e6):
        sol = solve_allocation(fam, m, a, budget=B)
        assert sol.objective == pytest.approx(f1 / B, rel=1e-9)
        assert sol.allocation.cost(m) == pytest.approx(B, rel=1e-9)


def test_euler_identity_and_degenerate_groups(rng):
    # optimum often leaves groups empty; objective must equal the BLUE variance there
    Sigma = random_spd(rng, 4)
    m = MomentSet(range(4), np.zeros(4), Sigma, [50, 2, 1, 0.3])
    sol = solve_allocation(GroupFamily.all_subsets(range(4)), m, [1, 0, 0, 0], budget=100)
    covered = sol.allocation.coverage()
    sub = SampleAllocation(sol.allocation.positive())
    a = np.eye(len(covered))[0]
    assert blue_sketch_variance(m.restrict(covered), sub, a) == pytest.approx(sol.objective, rel=1e-9)


def test_solver_failure_is_reported(rng):
    Sigma = random_spd(rng, 4)
    m = MomentSet(range(4), np.zeros(4), Sigma, [50, 2, 1, 0.3])
    with pytest.raises(NumericalFailure):
        solve_allocation(GroupFamily.all_subsets(range(4)), m, [1, 0, 0, 0], max_iter=1)


def test_infeasible_family():
    m = MomentSet((0, 1), [0, 0], np.eye(2), [1, 1])
    with pytest.raises(Infeasible):
        solve_allocation(GroupFamily([(1,)], (0, 1)), m, [1.0, 0.0])


def test_cost_ratio_theorem(rng):
    for _ in range(10):
        n = int(rng.integers(2, 4))
        Sigma = random_spd(rng, n + 1)
        c_lf = rng.uniform(0.1, 1, size=n)
        c0 = 10 * c_lf.sum() * rng.uniform(1, 5)
        m = MomentSet(range(n + 1), np.zeros(n + 1), Sigma, np.r_[c0, c_lf])
        S = tuple(range(1, n + 1))
        PS = GroupFamily.all_subsets(S).groups
        full = tuple(range(n + 1))
        with_hf = [T for T in GroupFamily.all_subsets(full).groups if 0 in T]
        e0 = np.eye(n + 1)[0]
        f_explore = solve_allocation(GroupFamily(list(PS) + [full], full), m, e0).objective
        f_hf = solve_allocation(GroupFamily(list(PS) + with_hf, full), m, e0).objective
        c_r = m.mean_costs.sum()
        assert f_explore <= c_r / c0 * f_hf * (1 + 1e-9)


def test_gamma_examples(rng):
    m = MomentSet((1,), [0.0], [[2.0]], [3.0])
    assert gamma_of_S((1,), [1.5], m) == pytest.approx(1.5**2 * 2 * 3)
    assert gamma_uniform((1,), [1.5], [[2.0]], 3.0) == gamma_of_S((1,), [1.5], m)
    with pytest.warns(DegenerateSketchWarning):
        assert gamma_of_S((1,), [0.0], m) == 0.0
    assert gamma_uniform((1, 2), [1, 1], np.eye(2), 5.0) == 10.0
    m2 = _two_lf(rng)
    b = rng.normal(size=2)
    ref = grid_allocation_2lf(m2.covariance, m2.mean_costs, b)
    assert gamma_of_S((1, 2), b, m2) == pytest.approx(ref, rel=0.005)


def test_gamma_uniform_dominates(rng):
    for _ in range(30):
        s = int(rng.integers(1, 4))
        S = tuple(range(1, s + 1))
        cov = random_spd(rng, s, 0.05)
        m = MomentSet(S, np.zeros(s), cov, rng.uniform(0.1, 3, size=s))
        b = rng.normal(size=s)
        g = gamma_of_S(S, b, m)
        gu = gamma_uniform(S, b, cov, m.mean_costs.sum())
        assert gu >= g - 1e-9 * gu
        if s == 1:
            assert gu == pytest.approx(g, rel=1e-12)


def test_gamma_hat_consistency():
    rng = np.random.default_rng(21)
    Sigma = random_spd(rng, 3)
    ens = GaussianLinearEnsemble(np.zeros(3), Sigma, [10, 2, 1])
    S = (1, 2)
    _, b, _ = linear_model_coefficients(ens, S)
    truth = gamma_of_S(S, b, ens.moments())
    data = ens.draw_joint(100_000, rng)
    est = gamma_hat(S, fit_linear_model(data, S), empirical_moments(data))
    assert est == pytest.approx(truth, rel=0.03)
    # single model: closed form with the plug-in quantities
    fit1 = fit_linear_model(data, (2,))
    emp = empirical_moments(data)
    expected = emp.mean_costs[2] * fit1.coefficients[0] ** 2 * emp.covariance[2, 2]
    assert gamma_hat((2,), fit1, emp) == pytest.approx(expected, rel=1e-12)


def test_gamma_hat_near_collinear_small_sample(rng):
    z = rng.normal(size=5)
    X = np.column_stack([rng.normal(size=5), z, z * (1 + 1e-9), rng.normal(size=5)])
    from aetcopt.core import ExplorationData

    data = ExplorationData(X, np.ones_like(X))
    emp = empirical_moments(data)
    fit = fit_linear_model(data, (1, 3))
    # the Sigma_T for T = {1, 2} is numerically singular
    with pytest.raises(SingularGroupCovariance):
        gamma_hat((1, 2), type(fit)((1, 2), 0.0, np.array([1.0, 1.0]), 1.0, 5), emp)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_project_simplex(y):
    y = np.array(y)
    x = project_simplex(y)
    assert x.min() >= 0 and x.sum() == pytest.approx(1.0)
    # optimality: y - x is constant on the support and no larger off it
    r = y - x
    supp = x > 1e-12
    assert np.ptp(r[supp]) <= 1e-9 * (1 + np.abs(y).max())
    if (~supp).any():
        assert r[~supp].max() <= r[supp].min() + 1e-9 * (1 + np.abs(y).max())


def test_round_allocation_examples():
    costs = {1: 1.0, 2: 2.0}
    assert round_allocation(SampleAllocation({(1,): 3.7}), costs, 4.0).counts == {(1,): 3}
    assert round_allocation(SampleAllocation({(1,): 0.4}), costs, 1.0).counts == {(1,): 1}
    fixed = SampleAllocation({(1,): 2, (1, 2): 5})
    assert round_allocation(fixed, costs, 100.0) == fixed
    with pytest.raises(Infeasible):
        round_allocation(SampleAllocation({(1, 2): 0.5}), costs, 1.5)


def test_round_allocation_repairs_cheaply():
    costs = {1: 1.0, 2: 1.0, 3: 10.0}
    cont = SampleAllocation({(1,): 5.5, (2, 3): 0.6, (3,): 0.2})
    r = round_allocation(cont, costs, 20.0, (1, 2, 3))
    assert r.coverage() == (1, 2, 3)
    assert r.cost(costs) <= 20.0
    assert r.counts == {(1,): 5, (3,): 0, (2, 3): 1}
