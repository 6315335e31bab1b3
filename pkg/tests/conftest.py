import numpy as np
import pytest

from nlfeti import assembly, grid


def forcing(x, y):
    return np.full_like(np.asarray(x, dtype=float), -4.0)


def boundary_data(x, y):
    return x * x + y * y


def make_problem(L, m, p=None):
    """Lattice, kernel, assembled global system and optional decomposition."""
    lat = grid.build_lattice(L, m)
    ker = assembly.Kernel.for_lattice(lat)
    gs = assembly.assemble_global(lat, ker, forcing, boundary_data)
    decomp = grid.partition(lat, p) if p else None
    return lat, ker, gs, decomp


@pytest.fixture
def rng():
    return np.random.RandomState(20240817)
