import numpy as np
import pytest

from ternarych.energy import Parameters
from ternarych.femcore import DiscreteOperators
from ternarych.mesh import build_uniform_periodic_mesh


@pytest.fixture(scope="session")
def mesh4():
    return build_uniform_periodic_mesh(1.0, 4)


@pytest.fixture(scope="session")
def mesh8():
    return build_uniform_periodic_mesh(1.0, 8)


@pytest.fixture(scope="session")
def ops4(mesh4):
    return DiscreteOperators(mesh4)


@pytest.fixture(scope="session")
def ops8(mesh8):
    return DiscreteOperators(mesh8)


@pytest.fixture(scope="session")
def table_params():
    """The reference parameter set used throughout the experiments."""
    return Parameters()


@pytest.fixture(scope="session")
def soft_params():
    """Reference set with the shorter segment lengths of the accuracy runs."""
    return Parameters(a1=0.3, a2=0.3, a3=0.3)


def unwrapped_vertex_coords(mesh, e):
    """Unwrapped (local) vertex coordinates of element e.

    Reconstructed from the construction rule independently of the mesh's
    cached basis gradients: cell (i, j) is split along its lower-left to
    upper-right diagonal, lower triangles first.
    """
    n, h = mesh.n, mesh.h
    cell = e % (n * n)
    i, j = cell % n, cell // n
    x, y = i * h, j * h
    if e < n * n:
        return np.array([[x, y], [x + h, y], [x + h, y + h]])
    return np.array([[x, y], [x + h, y + h], [x, y + h]])


def vertex_formula_gradient(coords, values):
    """Closed-form P1 gradient from vertex coordinates and values."""
    (x1, y1), (x2, y2), (x3, y3) = coords
    two_area = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1)
    dx = (values[0] * (y2 - y3) + values[1] * (y3 - y1) + values[2] * (y1 - y2)) / two_area
    dy = (values[0] * (x3 - x2) + values[1] * (x1 - x3) + values[2] * (x2 - x1)) / two_area
    return np.array([dx, dy])


def random_interior_fields(rng, n_nodes, lo1=0.05, hi1=0.35, lo2=0.2, hi2=0.55):
    """Random nodal fields strictly inside the Gibbs triangle."""
    phi1 = rng.uniform(lo1, hi1, n_nodes)
    phi2 = rng.uniform(lo2, hi2, n_nodes)
    return phi1, phi2
