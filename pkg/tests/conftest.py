import numpy as np
import pytest

from weakbsde import Driver, LossMap, ProblemSpec, generate_paths

THETA = 0.3


@pytest.fixture(scope="session")
def bsqh():
    return ProblemSpec(LossMap.indicator(), Driver.linear(0.0, [-THETA]))


@pytest.fixture(scope="session")
def bsqh_small(bsqh):
    return generate_paths(bsqh, 40_000, 32, 123)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
