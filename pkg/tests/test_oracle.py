import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from weakbsde.gexpect import BinomialLattice, gexp_tree
from weakbsde.oracle import (TreeInstance, np_quantile_price, np_quantile_quadrature, random_convex_loss,
                             random_tree, stability_probe, tree_primal_bruteforce, tree_primal_enumerate,
                             tree_primal_exact)
from weakbsde.problem import Driver, LossMap, ProblemSpec
from weakbsde.simulate import generate_paths


def with_m(tree, m):
    return TreeInstance(tree.depth, tree.up_prob, tree.weights, tree.loss, m)


def test_quantile_price_zero_market_price():
    for m in (0.1, 0.37, 0.9):
        assert np_quantile_price(0.0, 1.0, m) == pytest.approx(m, abs=1e-15)


def test_quantile_price_endpoints():
    assert np_quantile_price(0.3, 1.0, 0.0) == 0.0
    assert np_quantile_price(0.3, 1.0, 1.0) == 1.0
    with pytest.raises(ValueError):
        np_quantile_price(0.3, 1.0, 1.5)


@pytest.mark.parametrize("m", [0.1, 0.5, 0.9])
def test_quantile_price_against_quadrature(m):
    closed = np_quantile_price(0.3, 1.0, m)
    assert np_quantile_quadrature(0.3, 1.0, m) == pytest.approx(closed, abs=1e-9)
    # independent route: Q-probability of {W_T > b} with P(W_T > b) = m
    b = norm.ppf(1 - m)
    q, _ = integrate.quad(lambda w: np.exp(-0.3 * w - 0.045) * norm.pdf(w), b, np.inf, epsabs=1e-13)
    assert q == pytest.approx(closed, abs=1e-10)
    if m == 0.5:
        assert closed == pytest.approx(0.3820885778, abs=1e-10)


def test_quantile_price_shape():
    m = np.linspace(0, 1, 201)
    y = np.array([np_quantile_price(0.3, 1.0, x) for x in m])
    assert np.all(np.diff(y) >= 0)
    assert np.all(np.diff(y, 2) >= -1e-12)


def test_depth_one_example():
    tree = TreeInstance(1, np.array([0.5]), np.array([0.5, 1.5]), LossMap.linear(), 0.5)
    np.testing.assert_allclose(tree.pricing, [0.25, 0.75])
    y, M = tree_primal_exact(tree)
    assert y == pytest.approx(0.25, abs=1e-15)
    np.testing.assert_array_equal(M, [1.0, 0.0])


def test_undistorted_tree_gives_phi_of_m(rng):
    for _ in range(10):
        t = random_tree(rng, depth=3)
        t = TreeInstance(t.depth, t.up_prob, np.ones(8), t.loss, t.m)
        y, _ = tree_primal_exact(t)
        assert y == pytest.approx(float(t.loss.phi(t.m)), abs=1e-12)


def test_zero_threshold(rng):
    t = with_m(random_tree(rng, depth=2), 0.0)
    y, M = tree_primal_exact(t)
    assert np.all(M == 0.0)
    assert y == pytest.approx(float(t.loss.phi(0.0)) * t.pricing.sum(), abs=1e-15)


def test_exact_rejects_nonconvex_and_bad_m(rng):
    t = random_tree(rng, depth=1)
    with pytest.raises(ValueError):
        tree_primal_exact(TreeInstance(1, t.up_prob, t.weights, LossMap.from_phi([0, 0.5, 1], [0, 0.8, 1]), 0.5))
    with pytest.raises(ValueError):
        tree_primal_exact(with_m(t, 1.2))


def test_instance_validation():
    with pytest.raises(ValueError):
        TreeInstance(1, np.array([1.0]), np.ones(2), LossMap.linear(), 0.5)
    with pytest.raises(ValueError):
        TreeInstance(2, np.array([0.5]), np.ones(4), LossMap.linear(), 0.5)


def test_exact_profile_is_feasible(rng):
    for _ in range(20):
        t = random_tree(rng)
        y, M = tree_primal_exact(t)
        assert np.dot(t.leaf_prob, M) == pytest.approx(t.m, abs=1e-12)
        assert M.min() >= 0 and M.max() <= 1
        assert y == pytest.approx(t.objective(M), abs=1e-12)


def test_dp_matches_literal_enumeration(rng):
    for _ in range(5):
        t = random_tree(rng, depth=1)
        brute, _ = tree_primal_bruteforce(t, grid=10, units=20_000)
        assert brute >= tree_primal_enumerate(t, grid=10) - 1e-12
        # the DP may only lose the few grid vectors whose mean sits within rounding of the window edge
        lower, _ = tree_primal_exact(with_m(t, max(t.m - 0.1, 0.0)))
        assert brute >= lower - 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_exact_is_below_any_grid_vector(seed):
    rng = np.random.default_rng(seed)
    t = random_tree(rng, depth=2)
    M = rng.integers(0, 51, size=4) / 50
    m = float(np.dot(t.leaf_prob, M))
    y, _ = tree_primal_exact(with_m(t, m))
    assert y <= t.objective(M) + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_tree_value_convex_in_threshold(seed):
    rng = np.random.default_rng(seed)
    t = random_tree(rng, depth=2)
    ms = np.linspace(0, 1, 11)
    y = np.array([tree_primal_exact(with_m(t, m))[0] for m in ms])
    assert np.all(np.diff(y, 2) >= -1e-12)


def test_from_lattice_matches_tree_recursion():
    lat = BinomialLattice(4, 1.0, recombining=False)
    tree = TreeInstance.from_lattice(lat, -0.05, -0.2, LossMap.linear(), 0.5)
    x = np.random.default_rng(3).uniform(size=16)
    direct = gexp_tree(lat, x, Driver.linear(-0.05, [-0.2])).Y0
    assert np.dot(tree.pricing, x) == pytest.approx(direct, abs=1e-13)


def test_random_loss_is_convex_and_monotone(rng):
    for _ in range(20):
        x, v = random_convex_loss(rng).knots
        s = np.diff(v) / np.diff(x)
        assert np.all(s >= -1e-15) and np.all(np.diff(s) >= -1e-12)
        assert 0 <= v.min() and v.max() <= 1


def test_stability_trivial_cases():
    spec0 = ProblemSpec(LossMap.power_loss(2.0), Driver.zero())
    rep = stability_probe(spec0, [0.1, 0.01, 0.0], lattice=BinomialLattice(8))
    assert rep.rows[-1].err_shift == 0.0
    for r in rep.rows[:2]:
        assert r.err_shift == pytest.approx(r.delta, abs=1e-14)
    rep.check()


def test_stability_discounting():
    spec = ProblemSpec(LossMap.linear(), Driver.linear(-0.05, [0.0]))
    ens = generate_paths(spec, 1000, 16, 1)
    rep = stability_probe(spec, [0.01], ens)
    assert rep.rows[0].err_shift == pytest.approx(0.01 * np.exp(-0.05), abs=1e-14)
    rep.check()


def test_stability_nonlinear_within_envelope():
    spec = ProblemSpec(LossMap.indicator(), Driver.abs_z(0.4, a_y=0.1))
    rep = stability_probe(spec, [0.2, 0.05, 0.01], lattice=BinomialLattice(10))
    assert rep.linear_exact is None
    rep.check()
