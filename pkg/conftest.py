"""
Shared fixtures: a small grid and a cheap simulation setup.
"""
from dataclasses import replace

import numpy as np
import pytest

from trajectory.dynamics import PhysParams, SimulationSetup
from trajectory.utils.grid_space import Field, Grid
from trajectory.utils.noise import make_basis, make_coefficients


@pytest.fixture
def grid():
    return Grid(10.0, 128)


@pytest.fixture
def basis(grid):
    return make_basis(grid, 16)


@pytest.fixture
def spec(basis):
    return make_coefficients(1.0, 2.0, 16, basis)


@pytest.fixture
def params(grid):
    force = Field.from_function(grid, lambda x: np.exp(-x ** 2 / 2.0))
    return PhysParams(1.0, 1 + 0.5j, 1 + 1j, 1.0, force)


@pytest.fixture
def setup(params, spec, basis):
    return SimulationSetup(params, spec, basis, dt=0.005, seed=11, N=8, record_every=10)


@pytest.fixture
def linear_setup(setup, grid):
    """Unforced linear equation with real viscosity."""
    linear = replace(setup.params, nu=1.0, alpha=0, h=Field.zeros(grid))
    return replace(setup, params=linear)


@pytest.fixture
def u0(grid):
    profile = Field.from_function(grid, lambda x: (1 + 0.5j) * np.exp(-x ** 2 / 8.0))
    return profile * (2.0 / np.sqrt(np.sum(np.abs(profile.values) ** 2) * grid.dx))
