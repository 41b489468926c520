import numpy as np
import pytest

from hypoharnack.geometry import Cylinder, PhasePoint
from hypoharnack.grid import Grid


@pytest.fixture
def small_grid():
    return Grid(-1.0, 0.0, 16, 3.0, 25, 3.0, 25)


@pytest.fixture
def base():
    return PhasePoint.origin()


@pytest.fixture
def cylinders(base):
    return Cylinder(base, 0.25, 0.5), Cylinder(base, 0.5, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
