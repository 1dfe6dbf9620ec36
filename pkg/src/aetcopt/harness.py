"""Repeated-trial experiments, loss sweeps and subset landscapes.

Every trial gets its own generator seeded from
``(seed, budget_index, trial_index, estimator_index)``, so results do not
depend on how trials are split across worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .aetc import (
    AETC,
    AETC_OPT,
    AETC_OPT_E,
    CovarianceSource,
    LossProfile,
    PolicyChoice,
    geometric_alpha,
    loss,
    run_aetc,
)
from .allocation import gamma_hat, gamma_of_S, gamma_uniform
from .core import AetcError, OutOfDomain, Subset, enumerate_subsets, format_subset, parse_subset, subset
from .problems import (
    GaussianLinearEnsemble,
    ensemble_from_dict,
    load_fixture,
    mc_baseline,
    oracle_mlblue_allocation,
    oracle_mlblue_baseline,
    oracle_quantities,
)
from .regression import empirical_moments, fit_linear_model

SPEC_VERSION = 1
RESULT_SCHEMA_VERSION = 1
CSV_COLUMNS = ("schema_version", "estimator", "budget", "metric", "value")
QUANTILES = (0.05, 0.5, 0.95)

ESTIMATOR_KINDS = ("MC", "ORACLE_MLBLUE", "AETC", "AETC_OPT", "AETC_OPT_E")
_POLICIES = {"AETC": AETC, "AETC_OPT": AETC_OPT, "AETC_OPT_E": AETC_OPT_E}


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str
    name: str = ""
    alpha_base: float | None = None
    max_subset_size: int | None = None

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}; expected one of {ESTIMATOR_KINDS}")
        if not self.name:
            object.__setattr__(self, "name", self.kind)

    @classmethod
    def from_obj(cls, obj) -> "EstimatorConfig":
        if isinstance(obj, EstimatorConfig):
            return obj
        if isinstance(obj, str):
            return cls(obj)
        allowed = {"kind", "name", "alpha_base", "max_subset_size"}
        extra = set(obj) - allowed
        if extra:
            raise ValueError(f"unknown estimator keys {sorted(extra)}")
        return cls(**obj)


@dataclass
class ExperimentSpec:
    """What to run: an ensemble, a budget ladder, estimators and a trial count.

    ``ensemble`` is a fixture path or bundled name, an inline fixture dict,
    or an ensemble object.
    """

    ensemble: object
    budgets: Sequence[float]
    estimators: Sequence = ("MC", "ORACLE_MLBLUE", "AETC_OPT")
    trials: int = 100
    seed: int = 0
    max_subset_size: int | None = None
    alpha_base: float = 4.0
    subset_pool: Sequence | None = None

    def __post_init__(self):
        self.budgets = [float(b) for b in self.budgets]
        if not self.budgets:
            raise ValueError("at least one budget is required")
        if any(b <= 0 for b in self.budgets) or any(b2 <= b1 for b1, b2 in zip(self.budgets, self.budgets[1:])):
            raise ValueError("budgets must be positive and strictly increasing")
        if int(self.trials) < 1:
            raise ValueError("trials must be at least 1")
        self.trials = int(self.trials)
        self.seed = int(self.seed)
        self.estimators = [EstimatorConfig.from_obj(e) for e in self.estimators]
        names = [e.name for e in self.estimators]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate estimator names {names}")
        if self.alpha_base <= 1:
            raise ValueError("alpha_base must exceed 1 so that alpha_q -> 0")
        if self.subset_pool is not None:
            self.subset_pool = [subset(parse_subset(S) if isinstance(S, str) else S) for S in self.subset_pool]

    _KEYS = ("version", "ensemble", "budgets", "estimators", "trials", "seed", "max_subset_size", "alpha_base", "subset_pool")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        extra = set(d) - set(cls._KEYS)
        if extra:
            raise ValueError(f"unknown spec keys {sorted(extra)}")
        if d.get("version") != SPEC_VERSION:
            raise ValueError(f"spec version must be {SPEC_VERSION}, got {d.get('version')!r}")
        if "ensemble" not in d or "budgets" not in d:
            raise ValueError("spec needs 'ensemble' and 'budgets'")
        kwargs = {k: v for k, v in d.items() if k != "version"}
        return cls(**kwargs)

    def to_dict(self) -> dict:
        ens = self.ensemble
        if isinstance(ens, GaussianLinearEnsemble):
            ens = ens.to_dict()
        return {
            "version": SPEC_VERSION,
            "ensemble": ens,
            "budgets": list(self.budgets),
            "estimators": [asdict(e) for e in self.estimators],
            "trials": self.trials,
            "seed": self.seed,
            "max_subset_size": self.max_subset_size,
            "alpha_base": self.alpha_base,
            "subset_pool": None if self.subset_pool is None else [format_subset(S) for S in self.subset_pool],
        }

    def resolve_ensemble(self) -> GaussianLinearEnsemble:
        ens = self.ensemble
        if isinstance(ens, GaussianLinearEnsemble):
            return ens
        if isinstance(ens, dict):
            ens = ensemble_from_dict(ens)
        else:
            ens = load_fixture(ens)
        if not isinstance(ens, GaussianLinearEnsemble):
            raise ValueError("experiments need an ensemble fixture with a joint law, not a cost table")
        return ens


@dataclass(frozen=True)
class TrialRecord:
    estimator: str
    budget: float
    trial: int
    estimate: float
    error: float
    subset: str
    exploration_count: int
    exploration_cost: float
    exploitation_cost: float
    terminated_early: bool
    failure: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.failure)


@dataclass
class CellSummary:
    estimator: str
    budget: float
    trials: int
    failed: int
    mse: float
    mse_se: float
    exploration_fraction_quantiles: tuple
    exploration_count_median: float
    terminated_early: int
    subset_frequencies: dict


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    mu0: float
    cells: list[CellSummary]
    records: list[TrialRecord] = field(repr=False, default_factory=list)

    def cell(self, estimator: str, budget: float) -> CellSummary:
        for c in self.cells:
            if c.estimator == estimator and c.budget == float(budget):
                return c
        raise KeyError((estimator, budget))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in self.cells:
            for metric, value in _cell_metrics(c):
                w.writerow((RESULT_SCHEMA_VERSION, c.estimator, _fmt(c.budget), metric, _fmt(value)))
        return buf.getvalue()

    def to_json(self) -> str:
        cells = []
        for c in self.cells:
            d = asdict(c)
            d["exploration_fraction_quantiles"] = dict(zip((str(p) for p in QUANTILES), c.exploration_fraction_quantiles))
            cells.append(d)
        out = {
            "schema": "aetcopt.summary",
            "schema_version": RESULT_SCHEMA_VERSION,
            "mu0": self.mu0,
            "spec": self.spec.to_dict(),
            "cells": cells,
        }
        return json.dumps(out, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _cell_metrics(c: CellSummary):
    yield "trials", c.trials
    yield "failed", c.failed
    yield "terminated_early", c.terminated_early
    yield "mse", c.mse
    yield "mse_se", c.mse_se
    for p, v in zip(QUANTILES, c.exploration_fraction_quantiles):
        yield f"exploration_fraction_q{p:g}", v
    yield "exploration_count_median", c.exploration_count_median
    for S, count in c.subset_frequencies.items():
        yield f"subset_frequency:{S}", count


def trial_rng(seed: int, budget_index: int, trial: int, estimator_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, budget_index, trial, estimator_index]))


def _run_one(ens, cfg: EstimatorConfig, spec_view: dict, budget: float, rng, oracle_alloc):
    kind = cfg.kind
    if kind == "MC":
        return mc_baseline(ens, budget, rng=rng)
    if kind == "ORACLE_MLBLUE":
        return oracle_mlblue_baseline(ens, budget, rng=rng, allocation=oracle_alloc)
    alpha_base = cfg.alpha_base if cfg.alpha_base is not None else spec_view["alpha_base"]
    mss = cfg.max_subset_size if cfg.max_subset_size is not None else spec_view["max_subset_size"]
    return run_aetc(
        ens,
        budget,
        _POLICIES[kind],
        mss,
        rng=rng,
        alpha=geometric_alpha(alpha_base),
        subset_pool=spec_view["subset_pool"],
    )


def _run_chunk(args) -> list[TrialRecord]:
    ens, cfg, est_idx, spec_view, budget, b_idx, trials, oracle_alloc = args
    mu0 = float(ens.mu[0])
    out = []
    for t in trials:
        rng = trial_rng(spec_view["seed"], b_idx, t, est_idx)
        try:
            r = _run_one(ens, cfg, spec_view, budget, rng, oracle_alloc)
        except (AetcError, ValueError, np.linalg.LinAlgError) as err:
            out.append(TrialRecord(cfg.name, budget, t, math.nan, math.nan, "", 0, 0.0, 0.0, False, f"{type(err).__name__}: {err}"))
            continue
        out.append(
            TrialRecord(
                cfg.name,
                budget,
                t,
                r.estimate,
                r.estimate - mu0,
                format_subset(r.chosen_subset),
                int(r.exploration_count),
                float(r.exploration_cost),
                float(r.exploitation_cost),
                bool(r.terminated_early),
            )
        )
    return out


def summarize(records: Sequence[TrialRecord], estimator: str, budget: float) -> CellSummary:
    ok = [r for r in records if not r.failed]
    n = len(ok)
    sq = np.array([r.error**2 for r in ok])
    mse = math.fsum(sq) / n if n else math.nan
    se = float(np.std(sq, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    if n:
        frac = np.array([r.exploration_cost / budget for r in ok])
        quant = tuple(float(v) for v in np.quantile(frac, QUANTILES))
        qmed = float(np.median([r.exploration_count for r in ok]))
    else:
        quant = (math.nan,) * len(QUANTILES)
        qmed = math.nan
    freq: dict[str, int] = {}
    for r in ok:
        if r.subset not in ("", "{}"):
            freq[r.subset] = freq.get(r.subset, 0) + 1
    freq = dict(sorted(freq.items(), key=lambda kv: (len(parse_subset(kv[0])), parse_subset(kv[0]))))
    return CellSummary(
        estimator, budget, len(records), len(records) - n, mse, se, quant, qmed, sum(r.terminated_early for r in ok), freq
    )


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> ExperimentResult:
    """Run every estimator at every budget for ``spec.trials`` trials and aggregate.

    Per-trial failures are recorded, not raised. Output is identical for any
    ``workers``.
    """
    ens = spec.resolve_ensemble()
    spec_view = {
        "seed": spec.seed,
        "alpha_base": spec.alpha_base,
        "max_subset_size": spec.max_subset_size,
        "subset_pool": spec.subset_pool,
    }
    oracle_allocs = {}
    if any(e.kind == "ORACLE_MLBLUE" for e in spec.estimators):
        for B in spec.budgets:
            oracle_allocs[B] = oracle_mlblue_allocation(ens, B)

    workers = max(1, int(workers))
    # chunk so that each worker gets several pieces per cell for load balance
    n_chunks = 1 if workers == 1 else min(spec.trials, 4 * workers)
    bounds = np.linspace(0, spec.trials, n_chunks + 1).astype(int)
    jobs = []
    for e_idx, cfg in enumerate(spec.estimators):
        for b_idx, B in enumerate(spec.budgets):
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                if hi > lo:
                    jobs.append((ens, cfg, e_idx, spec_view, B, b_idx, range(lo, hi), oracle_allocs.get(B)))
    if workers == 1:
        chunks = [_run_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_chunk, jobs))
    records = [r for chunk in chunks for r in chunk]
    order = {cfg.name: i for i, cfg in enumerate(spec.estimators)}
    records.sort(key=lambda r: (order[r.estimator], r.budget, r.trial))
    cells = []
    for cfg in spec.estimators:
        for B in spec.budgets:
            cell = [r for r in records if r.estimator == cfg.name and r.budget == B]
            cells.append(summarize(cell, cfg.name, B))
    return ExperimentResult(spec, float(ens.mu[0]), cells, records)


# -- tables ---------------------------------------------------------------------


@dataclass
class Table:
    columns: tuple[str, ...]
    rows: list[tuple]

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([format_subset(v) if isinstance(v, tuple) else (_fmt(v) if isinstance(v, (float, int, np.floating)) else v) for v in r])
        return buf.getvalue()

    def __len__(self):
        return len(self.rows)


def loss_sweep(
    ensemble: GaussianLinearEnsemble,
    S,
    budget: float,
    q_grid: Iterable[float],
    seed: int = 0,
    *,
    policy: PolicyChoice = AETC_OPT_E,
    alpha_base: float | None = None,
) -> Table:
    """Oracle loss and the loss estimated from one exploration stream, on a grid of exploration counts.

    The estimated column at ``q`` uses only the first ``q`` rows of a single
    exploration stream; it is NaN where ``q < |S| + 2``.
    """
    S = subset(S)
    q_grid = [float(q) for q in q_grid]
    oq = oracle_quantities(ensemble, S, budget)
    c_r = ensemble.exploration_cost
    uniform = policy.exploitation_policy.value == "uniform_mc"
    g_or = oq.gamma_unif if uniform else oq.gamma_opt
    oracle_profile = LossProfile(oq.sigma2_S, g_or, c_r, budget)
    rng = np.random.default_rng(seed)
    q_max = max(int(math.floor(q)) for q in q_grid)
    stream = ensemble.draw_joint(max(q_max, 1), rng)
    rows = []
    for q in q_grid:
        try:
            o = loss(oracle_profile, q)
        except OutOfDomain as err:
            raise OutOfDomain(f"q={q} outside (0, {budget / c_r})") from err
        est = math.nan
        qi = int(math.floor(q))
        if qi >= len(S) + 2:
            data = stream.head(qi)
            try:
                fit = fit_linear_model(data, S)
                emp = empirical_moments(data)
                k_hat = fit.residual_variance + (0.0 if alpha_base is None else alpha_base ** (-qi))
                if policy.covariance_source is CovarianceSource.ORACLE:
                    mom = ensemble.moments().restrict(S)
                else:
                    mom = emp.restrict(S)
                if uniform:
                    g_hat = gamma_uniform(S, fit.coefficients, mom.covariance, float(mom.mean_costs.sum()))
                elif policy.covariance_source is CovarianceSource.ORACLE:
                    g_hat = gamma_of_S(S, fit.coefficients, mom)
                else:
                    g_hat = gamma_hat(S, fit, emp)
                c_hat = float(data.costs.sum(axis=1).mean())
                est = loss(LossProfile(k_hat, g_hat, c_hat, budget), q)
            except (AetcError, ValueError):
                est = math.nan
        rows.append((q, o, est))
    return Table(("q", "oracle_loss", "estimated_loss"), rows)


def subset_landscape(
    ensemble: GaussianLinearEnsemble,
    budget: float,
    max_subset_size: int | None = None,
    pool: Iterable | None = None,
    uniform: bool = False,
) -> Table:
    """Oracle optimal loss of every subset in the pool, sorted ascending (ties by size, then lexicographic)."""
    if pool is None:
        pool = enumerate_subsets(ensemble.n, max_subset_size)
    rows = []
    for S in pool:
        oq = oracle_quantities(ensemble, subset(S), budget)
        L = oq.loss_star_uniform if uniform else oq.loss_star
        q = oq.q_star_uniform if uniform else oq.q_star
        g = oq.gamma_unif if uniform else oq.gamma_opt
        rows.append((oq.subset, L, q, oq.sigma2_S, g))
    rows.sort(key=lambda r: (r[1], len(r[0]), r[0]))
    return Table(("subset", "optimal_loss", "q_star", "k", "gamma"), rows)
