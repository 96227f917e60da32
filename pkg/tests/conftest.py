import pytest

from src.kinetic import VelocityGrid
from src.schemas import InitialLaw, RngState


@pytest.fixture
def rng():
    return RngState(seed=12345)


@pytest.fixture
def two_bump():
    return InitialLaw.two_bump()


@pytest.fixture
def maxwellian():
    return InitialLaw.maxwellian(2, 1.0)


@pytest.fixture
def small_grid():
    return VelocityGrid(cutoff=4.0, resolution=16)
