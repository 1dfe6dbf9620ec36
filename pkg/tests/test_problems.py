import warnings

import numpy as np
import pytest

from aetcopt import GaussianLinearEnsemble
from aetcopt.allocation import GroupFamily
from aetcopt.core import FixtureNotFound, Infeasible, enumerate_subsets
from aetcopt.mlblue import blue_sketch_variance
from aetcopt.problems import (
    ELASTICITY_COSTS,
    ELASTICITY_CORRELATIONS,
    CostTable,
    bundled_fixtures,
    elasticity_correlation,
    elasticity_surrogate,
    ensemble_from_dict,
    ice_sheet_costs,
    linear_model_coefficients,
    load_fixture,
    mc_baseline,
    oracle_best_subset,
    oracle_mlblue_allocation,
    oracle_mlblue_baseline,
    oracle_quantities,
    save_fixture,
)
from aetcopt.regression import fit_linear_model


def test_draw_joint_shapes_and_determinism():
    ens = GaussianLinearEnsemble(np.zeros(3), np.eye(3), [3, 2, 1])
    d = ens.draw_joint(1, np.random.default_rng(0))
    assert d.samples.shape == (1, 3)
    np.testing.assert_array_equal(d.costs, [[3, 2, 1]])
    a = ens.draw_joint(50, np.random.default_rng(42)).samples.tobytes()
    b = ens.draw_joint(50, np.random.default_rng(42)).samples.tobytes()
    assert a == b


def test_elasticity_published_values():
    ens = elasticity_surrogate()
    assert tuple(ens.mean_costs) == (4096, 64, 16, 4, 1)
    C = elasticity_correlation()
    np.testing.assert_allclose(C[0, 1:], [0.976, 0.940, 0.841, -0.146], rtol=0, atol=1e-15)
    assert np.linalg.eigvalsh(C).min() >= 1e-6
    samples = ens.draw_joint(1_000_000, np.random.default_rng(1)).samples
    corr = np.corrcoef(samples, rowvar=False)[0, 1:]
    assert np.abs(corr - np.array(ELASTICITY_CORRELATIONS)).max() <= 0.005


def test_draw_group_marginals():
    rng = np.random.default_rng(3)
    ens = elasticity_surrogate()
    W = ens.draw_group((1,), 3, rng)
    assert W.shape == (3, 1)
    T = (0, 2, 4)
    W = ens.draw_group(T, 100_000, rng)
    se = np.sqrt(np.diag(ens.Sigma)[list(T)] / W.shape[0])
    assert np.all(np.abs(W.mean(axis=0) - ens.mu[list(T)]) < 4 * se)
    full = tuple(range(5))
    a = ens.draw_group(full, 10, np.random.default_rng(5))
    b = ens.draw_joint(10, np.random.default_rng(5)).samples
    np.testing.assert_array_equal(a, b)


def test_random_costs_are_bounded():
    ens = GaussianLinearEnsemble(np.zeros(2), np.eye(2), [10, 1], cost_noise=0.1)
    c = ens.draw_joint(1000, np.random.default_rng(0)).costs
    assert c[:, 0].min() >= 9 and c[:, 0].max() <= 11
    assert c[:, 0].std() > 0


def test_oracle_quantities_degenerate_cases():
    ind = GaussianLinearEnsemble(np.zeros(2), np.diag([2.0, 1.0]), [10, 1])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        oq = oracle_quantities(ind, (1,), 1e4)
    np.testing.assert_array_equal(oq.b_S, [0.0])
    assert oq.sigma2_S == 2.0 and oq.gamma_opt == 0.0 and oq.gamma_degenerate
    perfect = GaussianLinearEnsemble(np.zeros(2), [[4.0, 2.0], [2.0, 1.0]], [10, 1])
    assert oracle_quantities(perfect, (1,), 1e4).sigma2_S == pytest.approx(0.0, abs=1e-14)


def test_elasticity_oracle_best_subset():
    ens = elasticity_surrogate()
    best = oracle_best_subset(ens, 2e6)
    assert best.subset == (1, 2, 3, 4)
    runner_up = min(oracle_quantities(ens, S, 2e6).loss_star for S in enumerate_subsets(4) if S != (1, 2, 3, 4))
    assert runner_up > 2 * best.loss_star


def test_regression_recovers_gaussian_conditionals():
    ens = elasticity_surrogate()
    data = ens.draw_joint(1_000_000, np.random.default_rng(6))
    for S in [(1,), (2, 3), (1, 2, 3, 4)]:
        a, b, s2 = linear_model_coefficients(ens, S)
        fit = fit_linear_model(data, S)
        # compare through the fitted mean prediction and residual variance
        np.testing.assert_allclose(fit.coefficients, b, rtol=0.01, atol=0.01 * np.abs(b).max())
        assert fit.residual_variance == pytest.approx(s2, rel=0.01)


def test_mc_baseline():
    ens = GaussianLinearEnsemble([0.5], [[4.0]], [1.0])
    errs = [mc_baseline(ens, 100, seed=s).estimate - 0.5 for s in range(10_000)]
    assert np.mean(np.square(errs)) == pytest.approx(0.04, rel=0.05)
    with pytest.raises(Infeasible):
        mc_baseline(ens, 0.99, seed=0)
    const = GaussianLinearEnsemble([2.0, 0.0], [[0.0, 0.0], [0.0, 1.0]], [1.0, 1.0])
    assert mc_baseline(const, 10, seed=0).estimate == 2.0


def test_mc_baseline_cost_accounting():
    ens = GaussianLinearEnsemble([0.0], [[1.0]], [3.0], cost_noise=0.2)
    r = mc_baseline(ens, 100.0, seed=1)
    assert r.total_cost <= 100.0
    assert r.exploitation_cost > 0


def test_oracle_mlblue_reduces_to_mc():
    ens = GaussianLinearEnsemble([0.5, 0.0], [[4.0, 1.0], [1.0, 1.0]], [1.0, 0.1])
    r = oracle_mlblue_baseline(ens, 100.0, seed=3, family=GroupFamily([(0,)], (0,)))
    assert r.estimate == mc_baseline(ens, 100.0, seed=3).estimate


def test_oracle_mlblue_beats_mc_and_scales():
    ens = elasticity_surrogate()
    alloc = oracle_mlblue_allocation(ens, 2e6)
    sub = ens.moments().restrict(alloc.coverage())
    v = blue_sketch_variance(sub, alloc, np.eye(len(sub.indices))[0])
    assert v < ens.Sigma[0, 0] / (2e6 // 4096)
    alloc2 = oracle_mlblue_allocation(ens, 4e6)
    v2 = blue_sketch_variance(sub, alloc2, np.eye(len(sub.indices))[0])
    assert v2 == pytest.approx(v / 2, rel=0.01)  # rounding makes this approximate
    mse_blue = np.mean([(oracle_mlblue_baseline(ens, 2e6, seed=s, allocation=alloc).estimate - 1) ** 2 for s in range(300)])
    mse_mc = np.mean([(mc_baseline(ens, 2e6, seed=s).estimate - 1) ** 2 for s in range(300)])
    assert mse_blue < mse_mc
    r = oracle_mlblue_baseline(ens, 2e6, seed=0, allocation=alloc)
    assert r.total_cost == pytest.approx(alloc.cost(ens.moments()))
    assert r.total_cost <= 2e6


def test_fixture_round_trip(tmp_path):
    ens = elasticity_surrogate(cost_noise=0.05)
    path = tmp_path / "e.json"
    save_fixture(ens, path)
    back = load_fixture(path)
    assert back == ens
    assert back.Sigma.tobytes() == ens.Sigma.tobytes()
    save_fixture(back, tmp_path / "f.json")
    assert (tmp_path / "f.json").read_bytes() == path.read_bytes()
    table = ice_sheet_costs()
    save_fixture(table, tmp_path / "ice.json")
    assert load_fixture(tmp_path / "ice.json") == table


def test_bundled_fixtures():
    assert bundled_fixtures() == ["elasticity_surrogate", "ice_sheet_costs"]
    assert load_fixture("elasticity_surrogate") == elasticity_surrogate()
    ice = load_fixture("ice_sheet_costs")
    assert isinstance(ice, CostTable)
    assert ice.costs[0] == 15489.2 and ice.costs[-1] == 20.2 and len(ice.costs) == 13
    assert len(enumerate_subsets(len(ice.costs) - 1, 4)) == 793


def test_fixture_errors(tmp_path):
    with pytest.raises(FixtureNotFound, match="nope.json"):
        load_fixture(tmp_path / "nope.json")
    d = elasticity_surrogate().to_dict()
    d["typo"] = 1
    with pytest.raises(ValueError, match="typo"):
        ensemble_from_dict(d)
    d = elasticity_surrogate().to_dict()
    d["version"] = 99
    with pytest.raises(ValueError):
        ensemble_from_dict(d)
