"""A small repeated-trial comparison, as the CLI's ``run`` subcommand would do it.

Every trial uses its own random stream derived from the experiment seed, so
the table below does not depend on the worker count. The same experiment is
described in ``demos/specs/elasticity.json``; run it with

    aetcopt run --spec demos/specs/elasticity.json --out /tmp/elasticity
"""

from aetcopt import ExperimentSpec, run_experiment

spec = ExperimentSpec(
    "elasticity_surrogate",
    budgets=[5e5, 2e6],
    estimators=["MC", "ORACLE_MLBLUE", "AETC", "AETC_OPT"],
    trials=40,
    seed=1,
)
res = run_experiment(spec)
print(f"{'estimator':>14} {'budget':>8} {'MSE':>10} {'+-SE':>9}  explore share (5/50/95%)")
for c in res.cells:
    q = " / ".join(f"{v:.2f}" for v in c.exploration_fraction_quantiles)
    print(f"{c.estimator:>14} {c.budget:8.0e} {c.mse:10.3e} {c.mse_se:9.1e}  {q}")
print("\nsubsets picked by AETC_OPT at 2e6:", res.cell("AETC_OPT", 2e6).subset_frequencies)
