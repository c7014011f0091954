"""Quantile hedging of a unit cash claim under a market price of risk of 0.3.

The cheapest way to reach a success probability ``m`` is to hedge fully on the
paths where the pricing density is smallest.  This script builds that profile
on simulated paths, compares it with the closed-form price, and checks that
the dual bound closes the gap.

    python demos/quantile_hedging.py [n_paths]
"""
import sys

import numpy as np

from weakbsde import Driver, LossMap, ProblemSpec, dual_value, foc_residuals, generate_paths, profile_value
from weakbsde.oracle import np_quantile_price

theta = 0.3
n_paths = int(sys.argv[1]) if len(sys.argv) > 1 else 100_000
spec = ProblemSpec(LossMap.indicator(), Driver.linear(0.0, [-theta]))
ens = generate_paths(spec, n_paths, 64, seed=42)

print(f"{'m':>5} {'profile':>10} {'stderr':>9} {'closed form':>12} {'dual':>10} {'l_hat':>8} {'FOC':>8}")
for m in np.linspace(0.1, 0.9, 9):
    primal = profile_value(spec, m, ens)
    dual = dual_value(spec, m, ens, primal=primal.Y0)
    _, res = foc_residuals(spec, primal, dual, ens)
    print(f"{m:5.2f} {primal.Y0:10.6f} {primal.stderr:9.2e} {np_quantile_price(theta, 1.0, m):12.6f} "
          f"{dual.dual_value:10.6f} {dual.l_star:8.4f} {res:8.1e}")

# The optimal profile is an indicator of {W_T > b}: success is bought where it is cheapest.
sol = profile_value(spec, 0.5, ens)
w = ens.W_T[:, 0]
print(f"\nm = 0.5: hedged paths have W_T >= {w[sol.M_T == 1].min():.4f}, "
      f"unhedged have W_T <= {w[sol.M_T == 0].max():.4f}")
