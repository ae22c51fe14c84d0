import numpy as np
import pytest

from sfdde.forward import Coefficients
from sfdde.levy import LevyModel, TimeGrid


@pytest.fixture
def grid():
    return TimeGrid(0.0, 1.0, 0.5, 10)


@pytest.fixture
def one_atom():
    return LevyModel.from_atoms([(0.5, 2.0)])


@pytest.fixture
def two_atoms():
    return LevyModel.from_atoms([(0.5, 2.0), (-0.3, 1.0)])


def const(c):
    return lambda t, h, x: np.full_like(x, c)


def additive_jumps(scale=1.0):
    return lambda t, h, x, z: np.full_like(x, scale * z)


def linear_model():
    """mu = -x, sigma = 0.2, gamma = 0.1 z."""
    return Coefficients(mu=lambda t, h, x: -x, sigma=const(0.2), gamma=additive_jumps(0.1),
                        lipschitz_K=1.0, name="linear")
