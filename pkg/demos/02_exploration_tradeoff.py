"""Exploration versus exploitation on the elasticity surrogate.

For a candidate surrogate subset S, spending q joint draws on exploration
costs q * c_r and leaves the rest for exploitation. The loss k/q + gamma/(B -
c_r q) balances regression noise against exploitation variance. We print the
oracle optimum for every subset, then track how the loss estimated from one
exploration stream approaches the oracle curve.
"""

from aetcopt import elasticity_surrogate
from aetcopt.core import format_subset
from aetcopt.harness import loss_sweep, subset_landscape

ens = elasticity_surrogate()
B = 2e6
print(f"exploration cost per round c_r = {ens.exploration_cost:g}, budget {B:g}\n")

land = subset_landscape(ens, B)
print(f"{'subset':>12}  {'L*':>10}  {'q*':>7}")
for S, L, q, k, g in land.rows[:6]:
    print(f"{format_subset(S):>12}  {L:10.3e}  {q:7.1f}")
print(f"... {len(land) - 6} more subsets, worst L* = {land.rows[-1][1]:.3e}\n")

sweep = loss_sweep(ens, (1, 2, 3, 4), B, [8, 16, 32, 64, 128, 256, 400], seed=1)
print(f"{'q':>5}  {'oracle':>10}  {'estimated':>10}")
for q, o, e in sweep.rows:
    print(f"{q:5.0f}  {o:10.3e}  {e:10.3e}")
