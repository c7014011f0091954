"""A non-linear driver g = -0.4 z + 0.1 |z| (a drift known only up to +-0.1) with a shortfall loss.

No closed form exists here.  Policy search gives an upper bound, and the dual
restricted to constant controls gives a lower bound; the gap between them is
reported, not assumed to vanish.
"""
import numpy as np

from weakbsde import Driver, LossMap, PolicyFamily, ProblemSpec, dual_value, generate_paths, primal_value

spec = ProblemSpec(LossMap.power_loss(2.0), Driver.abs_z(0.1, a_z=[-0.4]))
ens = generate_paths(spec, 20_000, 16, seed=5)
for m in (0.25, 0.5, 0.75):
    up = primal_value(spec, m, ens, PolicyFamily("constant"), budget=60)
    lo = dual_value(spec, m, ens, inner_budget=40)
    print(f"m = {m:4.2f}: no control {float(spec.loss.phi(m)):.4f}  policy search {up.Y0:.4f} "
          f"(alpha = {np.round(up.params, 3)})  dual bound {lo.dual_value:.4f}  gap {up.Y0 - lo.dual_value:.4f}")
