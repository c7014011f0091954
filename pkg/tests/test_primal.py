import numpy as np
import pytest

from weakbsde.gexpect import gexp_linear
from weakbsde.oracle import np_quantile_price
from weakbsde.primal import (PolicyFamily, check_dpp, continuity_modulus, convexity_defect, delta_formula,
                             fit_multiplier, monotonicity_defect, primal_value, profile_value,
                             terminal_profile_policy, value_curve)
from weakbsde.problem import Driver, LossMap, ProblemSpec
from weakbsde.simulate import generate_paths
from weakbsde.transforms import convex_envelope

THETA = 0.3


@pytest.fixture(scope="module")
def zero_ens():
    return generate_paths(ProblemSpec(LossMap.linear(), Driver.zero()), 10_000, 16, 3)


def test_endpoints_profile(bsqh, bsqh_small):
    drv = bsqh.driver
    for m, phi in ((0.0, 0.0), (1.0, 1.0)):
        sol = profile_value(bsqh, m, bsqh_small)
        ref = gexp_linear(bsqh_small, np.full(bsqh_small.n_paths, phi), drv)
        assert abs(sol.Y0 - ref.Y0) <= 3 * max(sol.stderr, ref.stderr) + 1e-12


def test_endpoints_policy():
    spec = ProblemSpec(LossMap.power_loss(2.0), Driver.abs_z(0.3))
    ens = generate_paths(spec, 5000, 8, 4)
    assert primal_value(spec, 0.0, ens).Y0 == pytest.approx(0.0, abs=1e-12)
    assert primal_value(spec, 1.0, ens).Y0 == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        primal_value(spec, -0.1, ens)


def test_policy_never_worse_than_null_control():
    spec = ProblemSpec(LossMap.indicator(), Driver.abs_z(0.3))
    ens = generate_paths(spec, 5000, 8, 4)
    r = primal_value(spec, 0.4, ens, budget=40)
    assert r.Y0 <= 1.0 + 3 * r.stderr
    assert r.n_evals <= 41
    assert "budget" in r.flags


def test_policy_search_beats_null_control_under_distortion():
    spec = ProblemSpec(LossMap.power_loss(2.0), Driver.linear(0.0, [-THETA]))
    ens = generate_paths(spec, 5000, 8, 5)
    null = float(spec.loss.phi(0.5))
    for fam in (PolicyFamily(), PolicyFamily("feedback_grid", n_t=2, n_m=3)):
        r = primal_value(spec, 0.5, ens, fam)
        assert r.Y0 < null - 0.02
        # the profile route is optimal for linear drivers
        assert r.Y0 >= profile_value(spec, 0.5, ens).Y0 - 3 * r.stderr
    assert r.params.shape == (6,)


def test_bsqh_profile_against_oracle(bsqh, bsqh_small):
    for m in (0.2, 0.5, 0.8):
        sol = profile_value(bsqh, m, bsqh_small)
        ref = np_quantile_price(THETA, 1.0, m)
        assert abs(sol.Y0 - ref) <= max(3 * sol.stderr, 0.01 * ref)
        assert sol.m_realized == pytest.approx(m, abs=1e-12)
        assert sol.fractional is None or 0 <= sol.fractional < bsqh_small.n_paths


def test_profile_is_a_threshold_set(bsqh, bsqh_small):
    sol = profile_value(bsqh, 0.5, bsqh_small)
    W = bsqh_small.W_T[:, 0]
    whole = sol.M_T == 1.0
    # the cheap set is {W_T large}
    assert W[whole].min() >= W[sol.M_T == 0.0].max() - 1e-12


def test_profile_requires_linear_driver():
    spec = ProblemSpec(LossMap.linear(), Driver.abs_z(0.3))
    ens = generate_paths(spec, 100, 4, 1)
    with pytest.raises(ValueError):
        profile_value(spec, 0.5, ens)


def test_terminal_profile_identity_loss(bsqh_small):
    spec = ProblemSpec(LossMap.linear(), Driver.linear(0.0, [-THETA]))
    m, y0, se = terminal_profile_policy(spec, 1.2, bsqh_small)
    L_T = np.exp(-THETA * bsqh_small.W_T[:, 0] - THETA ** 2 / 2)
    assert m == pytest.approx(np.mean(L_T < 1.2), abs=1e-12)
    m0, y00, _ = terminal_profile_policy(spec, 1e-9, bsqh_small)
    assert m0 == 0.0 and y00 == pytest.approx(0.0, abs=1e-15)


def test_fit_multiplier_mixes_one_path():
    vals = np.linspace(0.1, 2.0, 7)

    def select(l):
        return (vals < l).astype(float)

    fit = fit_multiplier(select, 0.5, 7, np.zeros(7), np.ones(7))
    assert fit.M.mean() == pytest.approx(0.5, abs=1e-15)
    assert fit.fractional == 3
    assert fit.M[3] == pytest.approx(0.5)
    assert fit.bracket[0] <= vals[3] <= fit.bracket[1]


def test_convex_loss_zero_driver_curve_is_phi(zero_ens):
    spec = ProblemSpec(LossMap.power_loss(2.0), Driver.zero())
    grid = np.linspace(0, 1, 6)
    curve = value_curve(spec, grid, zero_ens, method="policy", budget=30)
    np.testing.assert_allclose(curve.values, spec.loss.phi(grid), atol=1e-12)


def test_nonconvex_zero_driver_curve_is_envelope(zero_ens):
    loss = LossMap.from_phi([0, 0.3, 0.3, 1], [0, 0.1, 0.5, 1])
    spec = ProblemSpec(loss, Driver.zero())
    grid = np.linspace(0, 1, 11)
    curve = value_curve(spec, grid, zero_ens, method="profile")
    env = convex_envelope(loss)(grid)
    assert np.all(np.abs(curve.values[1:-1] - env[1:-1]) <= 3 * curve.stderrs[1:-1] + 1e-12)


def test_curve_properties(bsqh, bsqh_small):
    grid = np.linspace(0, 1, 11)
    curve = value_curve(bsqh, grid, bsqh_small, method="profile")
    se = curve.stderrs.max()
    assert curve.convexity_defect <= 3 * se * 4
    assert curve.monotonicity_defect <= 3 * se
    assert [e.method for e in curve.entries] == ["profile"] * 11
    assert curve(0.5) == pytest.approx(curve.values[5])


def test_defect_helpers():
    m = np.linspace(0, 1, 5)
    assert convexity_defect(m, m ** 2) == 0.0
    assert convexity_defect(m, np.sqrt(m)) > 0
    assert monotonicity_defect([0, 0.2, 0.1]) == pytest.approx(0.1)


def test_delta_formula():
    assert delta_formula(0.25, 0.5) == pytest.approx(0.5)
    assert delta_formula(0.75, 0.5) == pytest.approx(0.5)
    assert delta_formula(0.4, 0.4) == 0.0


def test_continuity_modulus(bsqh, bsqh_small):
    rows = continuity_modulus(bsqh, 0.5, [0.2, 0.1, 0.05, 0.0], bsqh_small)
    assert rows[-1].diff == 0.0
    diffs = [r.diff for r in rows]
    assert all(a >= b - 1e-3 for a, b in zip(diffs[:-1], diffs[1:]))
    with pytest.raises(ValueError):
        continuity_modulus(bsqh, 0.9, [0.2], bsqh_small)


def test_dpp_trivial_case(zero_ens):
    spec = ProblemSpec(LossMap.power_loss(2.0), Driver.zero())
    rep = check_dpp(spec, 0.4, 0.5, zero_ens, resolution=11, n_policies=4)
    phi = float(spec.loss.phi(0.4))
    assert rep.lhs == pytest.approx(phi, abs=1e-12)
    # 0.4 is a knot of the inner grid, so the interpolated curve is exact there
    assert rep.rhs == pytest.approx(phi, abs=1e-12)
    assert rep.submartingale_ok


def test_dpp_rejects_off_grid_time(bsqh, bsqh_small):
    with pytest.raises(ValueError):
        check_dpp(bsqh, 0.5, 0.51, bsqh_small)
