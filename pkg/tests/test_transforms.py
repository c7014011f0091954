import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakbsde.problem import Driver, LossMap
from weakbsde.transforms import (biconjugate, convex_envelope, fenchel_driver, fenchel_loss,
                                 hull_envelope_bruteforce, lower_hull)


def test_indicator_envelope_is_identity():
    env = convex_envelope(LossMap.indicator())
    m = np.linspace(0, 1, 11)
    np.testing.assert_allclose(env(m), m, atol=1e-15)


def test_convex_map_is_its_own_envelope():
    m = np.linspace(0, 1, 51)
    env = convex_envelope(LossMap.from_phi(m, m ** 2))
    np.testing.assert_allclose(env.hat_phi_grid, m ** 2, atol=1e-15)
    assert env.contact_set.size == m.size


def test_envelope_against_chord_oracle():
    m = np.linspace(0, 1, 1001)
    v = np.minimum(2 * m, 0.2 + 0.5 * m)
    env = convex_envelope(LossMap.from_phi(m, v))
    brute = hull_envelope_bruteforce(m, v)
    np.testing.assert_allclose(env.hat_phi_grid, brute, atol=1e-12)
    np.testing.assert_allclose(env.hat_phi_grid, 0.7 * m, atol=1e-12)


def test_mixing_decomposition():
    env = convex_envelope(LossMap.from_phi([0, 0.3, 0.3, 1], [0, 0.1, 0.5, 1]))
    m = np.linspace(0, 1, 23)
    lo, hi, eps = env.mixing(m)
    assert np.all((eps >= 0) & (eps <= 1))
    assert np.all(lo <= m + 1e-15) and np.all(m <= hi + 1e-15)
    np.testing.assert_allclose(eps * lo + (1 - eps) * hi, m, atol=1e-14)
    phi = LossMap.from_phi([0, 0.3, 0.3, 1], [0, 0.1, 0.5, 1]).phi
    np.testing.assert_allclose(eps * phi(lo) + (1 - eps) * phi(hi), env(m), atol=1e-14)


def test_conjugate_of_identity():
    c = fenchel_loss(LossMap.linear())
    l = np.array([0.2, 0.9, 1.0, 1.1, 3.0])
    np.testing.assert_allclose(c.value(l), np.maximum(l - 1, 0), atol=1e-15)
    np.testing.assert_array_equal(c.grad(l), [0, 0, 0, 1, 1])


def test_conjugate_of_indicator():
    c = fenchel_loss(LossMap.indicator())
    l = np.linspace(0.01, 5, 40)
    np.testing.assert_allclose(c.value(l), np.maximum(0, l - 1), atol=1e-15)
    assert set(np.unique(c.grad(l))) <= {0.0, 1.0}


def test_square_conjugate_at_one():
    m = np.linspace(0, 1, 1001)
    c = fenchel_loss(LossMap.from_phi(m, m ** 2))
    assert c.value(1.0) == pytest.approx(0.25, abs=1e-12)
    assert c.grad(1.0) == pytest.approx(0.5, abs=1e-12)
    fine = np.linspace(0, 1, 200_001)
    assert np.max(fine - fine ** 2) == pytest.approx(0.25, abs=1e-9)


def test_conjugate_extends_beyond_table():
    loss = LossMap.from_phi([0, 0.5, 1], [0.1, 0.2, 0.9])
    c = fenchel_loss(loss)
    assert c.value(1e6) == pytest.approx(1e6 - 0.9)
    assert c.value(1e-9) == pytest.approx(-0.1, abs=1e-8)


@st.composite
def random_phi(draw):
    n = draw(st.integers(2, 9))
    m = sorted(draw(st.lists(st.floats(0, 1), min_size=n, max_size=n, unique=True)))
    m[0], m[-1] = 0.0, 1.0
    if len(set(m)) < 2:
        m = [0.0, 1.0]
    v = sorted(draw(st.lists(st.floats(0, 1), min_size=len(m), max_size=len(m))))
    return np.array(m), np.array(v)


@settings(max_examples=80, deadline=None)
@given(random_phi())
def test_envelope_properties(phi):
    m, v = phi
    loss = LossMap.from_phi(m, v)
    env = convex_envelope(loss)
    km, kv = loss.knots
    hat = env(km)
    assert np.all(hat <= kv + 1e-12)
    np.testing.assert_allclose(hat, hull_envelope_bruteforce(km, kv), atol=1e-12)
    s = env.slopes
    assert np.all(np.diff(s) >= -1e-12)
    assert np.all(s >= -1e-12)
    np.testing.assert_allclose(hat[env.contact_set], kv[env.contact_set], atol=1e-12)


@settings(max_examples=80, deadline=None)
@given(random_phi(), st.floats(0.0, 1.0))
def test_fenchel_young(phi, mm):
    m, v = phi
    loss = LossMap.from_phi(m, v)
    c = fenchel_loss(loss)
    l = c.l_grid
    assert np.all(mm * l <= loss.phi(mm) + c.value(l) + 1e-12)
    g = c.grad(l)
    assert np.all(np.abs(g * l - convex_envelope(loss)(g) - c.value(l)) <= 1e-9 * np.maximum(1, l))
    assert np.all(c.value(l) >= -loss.phi(0.0) - 1e-12)
    assert np.all(c.value(l) >= l - loss.phi(1.0) - 1e-9 * l)
    assert np.all(np.diff(c.value(l)) >= -1e-12)


def test_biconjugate_recovers_envelope():
    m = np.linspace(0, 1, 201)
    loss = LossMap.from_phi(m, np.minimum(1, np.where(m < 0.4, 0.5 * m, 0.2 + 1.5 * (m - 0.4))))
    c = fenchel_loss(loss, np.linspace(0, 4, 4001))
    np.testing.assert_allclose(biconjugate(c, m), convex_envelope(loss)(m), atol=1e-3)


def test_lower_hull_drops_collinear_points():
    x = np.array([0.0, 0.5, 1.0])
    assert list(lower_hull(x, x.copy())) == [0, 2]


def test_driver_conjugates():
    lin = Driver.linear(0.0, [-0.3])
    assert fenchel_driver(lin, 0.0, [0.0, -0.3]) == 0.0
    assert fenchel_driver(lin, 0.0, [0.0, 0.0]) == np.inf
    zero = Driver.zero()
    assert fenchel_driver(zero, 0.0, [0.0, 0.0]) == 0.0
    assert fenchel_driver(zero, 0.0, [0.1, 0.0]) == np.inf
    ab = Driver.abs_z(1.0)
    assert fenchel_driver(ab, 0.0, [0.0, 0.7]) == 0.0
    assert fenchel_driver(ab, 0.0, [0.0, 1.2]) == np.inf
    assert fenchel_driver(lin, 0.0, [5.0, 0.0]) == np.inf


def test_lattice_conjugate_of_abs_z():
    drv = Driver.custom(lambda t, y, z: np.abs(z[:, 0]), K_g=1.0)
    with pytest.warns(RuntimeWarning):
        inside = fenchel_driver(drv, 0.0, [0.0, 0.5])
    assert inside == pytest.approx(0.0, abs=1e-12)
    with pytest.warns(RuntimeWarning):
        # finite lattice: sup over |z| <= 10 of z v - |z| for |v| > 1 grows with the box
        assert fenchel_driver(drv, 0.0, [0.0, 1.0]) == pytest.approx(0.0, abs=1e-12)
    assert fenchel_driver(drv, 0.0, [0.0, 1.5]) == np.inf
