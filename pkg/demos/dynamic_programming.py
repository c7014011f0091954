"""Splitting the horizon: the value at time 0 equals the best way to reach the
value curve at an intermediate time.

For each intermediate time the curve m -> Y_t(m) is solved on the later part
of the paths, then a first-stage problem is solved against it.  Random fixed
controls never beat the optimum (one-sided inequality).
"""
from weakbsde import Driver, LossMap, ProblemSpec, check_dpp, generate_paths

spec = ProblemSpec(LossMap.indicator(), Driver.linear(0.0, [-0.3]))
ens = generate_paths(spec, 50_000, 32, seed=3)
for t_mid in (0.25, 0.5, 0.75):
    r = check_dpp(spec, 0.5, t_mid, ens, n_policies=20)
    worst = min(v for v, _ in r.submartingale)
    print(f"t = {t_mid:4.2f}: direct {r.lhs:.5f}  two-stage {r.rhs:.5f}  relative gap {r.gap_rel:.1e}  "
          f"best fixed policy {worst:.5f}  one-sided ok: {r.submartingale_ok}")
