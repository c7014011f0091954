import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakbsde.problem import Driver, LossMap, MarketModel, ProblemSpec
from weakbsde.simulate import (BLOCK, ControlError, ControlPolicy, batch_stderr, brownian_increments,
                               evolve_control, evolve_deflator, generate_paths)

SPEC = ProblemSpec(LossMap.linear(), Driver.zero())


def test_seed_determinism():
    a = generate_paths(SPEC, 5000, 8, 42)
    b = generate_paths(SPEC, 5000, 8, 42)
    assert np.array_equal(a.dW, b.dW)
    assert not np.array_equal(a.dW, generate_paths(SPEC, 5000, 8, 43).dW)


def test_independent_of_threads_and_total_size():
    one = brownian_increments(3 * BLOCK + 17, 4, 2, 0.25, 9, threads=1)
    many = brownian_increments(3 * BLOCK + 17, 4, 2, 0.25, 9, threads=4)
    assert np.array_equal(one, many)
    prefix = brownian_increments(BLOCK + 5, 4, 2, 0.25, 9)
    assert np.array_equal(prefix, one[:BLOCK + 5])


def test_arrays_are_read_only():
    ens = generate_paths(SPEC, 100, 4, 1)
    with pytest.raises(ValueError):
        ens.dW[0, 0, 0] = 1.0


def test_increment_moments():
    ens = generate_paths(SPEC, 20_000, 4, 5)
    dW = ens.dW[:, :, 0]
    n = dW.shape[0]
    assert np.all(np.abs(dW.mean(axis=0)) < 4 * np.sqrt(ens.dt / n))
    assert np.all(np.abs(dW.var(axis=0) / ens.dt - 1) < 0.05)
    wt = ens.W_T[:, 0]
    se = np.sqrt(2.0 / n) * ens.T
    assert abs(wt.var() - ens.T) < 3 * se


def test_martingale_asset():
    spec = ProblemSpec(LossMap.linear(), Driver.zero(), market=MarketModel(100.0, 0.2, 0.0))
    ens = generate_paths(spec, 50_000, 16, 3)
    s = ens.S[:, -1]
    assert abs(s.mean() - 100.0) < 3 * s.std() / np.sqrt(s.size)
    np.testing.assert_allclose(ens.S[:, 0], 100.0, rtol=1e-14)


def test_bad_shapes():
    with pytest.raises(ValueError):
        generate_paths(SPEC, 10, 0, 1)
    with pytest.raises(ValueError):
        generate_paths(SPEC, 0, 4, 1)


def test_zero_control_keeps_m():
    ens = generate_paths(SPEC, 500, 8, 2)
    M = evolve_control(ens, 0.37, ControlPolicy.zero())
    assert np.all(M == 0.37)


def test_zero_threshold_admits_only_null_control():
    ens = generate_paths(SPEC, 500, 8, 2)
    M = evolve_control(ens, 0.0, ControlPolicy.constant(5.0))
    assert np.all(M == 0.0)


def test_constant_control_mean_and_bounds():
    ens = generate_paths(SPEC, 100_000, 16, 11)
    M = evolve_control(ens, 0.5, ControlPolicy.constant(0.5))
    assert M.min() >= 0.0 and M.max() <= 1.0
    mt = M[:, -1]
    assert abs(mt.mean() - 0.5) < 3 * mt.std() / np.sqrt(mt.size)


def test_absorption_is_permanent():
    ens = generate_paths(SPEC, 20_000, 64, 4)
    M = evolve_control(ens, 0.5, ControlPolicy.constant(3.0))
    hit = (M == 0.0) | (M == 1.0)
    assert hit[:, -1].any()
    # once absorbed, the path stays put
    first = np.argmax(hit, axis=1)
    for i in np.flatnonzero(hit.any(axis=1))[:200]:
        assert np.all(M[i, first[i]:] == M[i, first[i]])


def test_non_finite_control_aborts():
    ens = generate_paths(SPEC, 50, 4, 2)
    pol = ControlPolicy(lambda t, f, M: np.full((M.size, 1), np.nan))
    with pytest.raises(ControlError, match="path 0"):
        evolve_control(ens, 0.5, pol)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.floats(-3, 3), st.integers(0, 2 ** 32))
def test_control_stays_in_unit_interval(m0, a, seed):
    ens = generate_paths(SPEC, 200, 16, seed)
    pol = ControlPolicy(lambda t, f, M: a * (1 + f["W"]))
    M = evolve_control(ens, m0, pol)
    assert M.min() >= 0.0 and M.max() <= 1.0


def test_deflator_cases():
    ens = generate_paths(SPEC, 50_000, 16, 8)
    assert np.all(evolve_deflator(ens, 0.0, [0.0]) == 1.0)
    L = evolve_deflator(ens, 0.0, [-0.3])
    lt = L[:, -1]
    assert abs(lt.mean() - 1) < 3 * lt.std() / np.sqrt(lt.size)
    assert np.all(L > 0)
    np.testing.assert_allclose(evolve_deflator(ens, 0.1, [0.0])[:, -1], np.exp(0.1), rtol=1e-14)
    with pytest.raises(ValueError, match="outside dual domain"):
        evolve_deflator(ens, 0.0, [-0.5], K_g=0.3)


def test_feedback_deflator_matches_constant():
    ens = generate_paths(SPEC, 2000, 32, 8)
    const = evolve_deflator(ens, 0.05, [-0.2])
    fb = evolve_deflator(ens, feedback=lambda t, w: (0.05, np.array([-0.2])))
    np.testing.assert_allclose(fb, const, rtol=1e-12)


def test_batch_stderr_scale():
    x = np.random.default_rng(0).normal(size=64_000)
    assert batch_stderr(x) == pytest.approx(1 / np.sqrt(x.size), rel=0.5)
    assert batch_stderr(np.ones(100)) == 0.0
