"""Uniform periodic triangulation of the square (0, L)^2.

Every grid cell of an n-by-n node lattice is split along the same
diagonal (lower-left to upper-right), which keeps the triangulation
shape-regular with analytically known geometry: all elements have area
h^2/2 and diameter sqrt(2)*h, every node touches exactly six triangles,
and the patch area around each node is 3*h^2.  Periodic identification
happens at the index level, so there are exactly n^2 nodes and 2*n^2
elements and the P1 space is genuinely periodic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    """Raised for invalid mesh or run configuration values."""


@dataclass(frozen=True)
class PeriodicMesh:
    """Immutable uniform periodic triangulation with P1 geometry caches.

    Attributes
    ----------
    L : float
        Side length of the periodic square domain.
    n : int
        Nodes per side; spacing is ``h = L / n``.
    nodes : (n^2, 2) array
        Node coordinates, node ``j*n + i`` sits at ``(i*h, j*h)``.
    elements : (2*n^2, 3) array of int
        Vertex indices per triangle (periodic wraparound applied).
    element_areas : (2*n^2,) array
        Signed areas; all equal ``h^2 / 2``.
    basis_gradients : (2*n^2, 3, 2) array
        Constant gradient of each vertex basis function on each element,
        computed from the unwrapped (local) vertex coordinates.
    element_diameters : (2*n^2,) array
        Longest edge per triangle (``sqrt(2)*h``).
    patch_areas : (n^2,) array
        Total area of the six triangles touching each node (``3*h^2``).
    lumped_mass : (n^2,) array
        Vertex-quadrature weights ``patch_areas / 3`` (``h^2`` each).
    """

    L: float
    n: int
    nodes: np.ndarray = field(repr=False)
    elements: np.ndarray = field(repr=False)
    element_areas: np.ndarray = field(repr=False)
    basis_gradients: np.ndarray = field(repr=False)
    element_diameters: np.ndarray = field(repr=False)
    patch_areas: np.ndarray = field(repr=False)
    lumped_mass: np.ndarray = field(repr=False)

    @property
    def h(self) -> float:
        return self.L / self.n

    @property
    def n_nodes(self) -> int:
        return self.n * self.n

    @property
    def n_elements(self) -> int:
        return 2 * self.n * self.n

    @property
    def area(self) -> float:
        """Total domain area |Omega| = L^2."""
        return self.L * self.L

    def shape_regularity(self) -> float:
        """max_e diameter^2 / area, equal to 4 on this mesh family."""
        return float(np.max(self.element_diameters**2 / self.element_areas))


def build_uniform_periodic_mesh(L: float, n: int) -> PeriodicMesh:
    """Build the uniform periodic triangulation of (0, L)^2.

    Parameters
    ----------
    L : float
        Domain side length, must be positive.
    n : int
        Nodes per side, must be at least 2.

    Raises
    ------
    ConfigurationError
        If ``n < 2`` or ``L <= 0``.
    """
    if not isinstance(n, (int, np.integer)) or n < 2:
        raise ConfigurationError(f"nodes per side must be an integer >= 2, got {n!r}")
    if not np.isfinite(L) or L <= 0:
        raise ConfigurationError(f"domain length must be positive, got {L!r}")

    n = int(n)
    h = L / n
    ii, jj = np.meshgrid(np.arange(n), np.arange(n))  # jj = row (y), ii = col (x)
    nodes = np.column_stack([(ii * h).ravel(), (jj * h).ravel()])

    # Node index of lattice point (i, j) with periodic wrap.
    def idx(i, j):
        return (j % n) * n + (i % n)

    i = ii.ravel()
    j = jj.ravel()
    v00 = idx(i, j)
    v10 = idx(i + 1, j)
    v01 = idx(i, j + 1)
    v11 = idx(i + 1, j + 1)

    # Cell (i, j) split along the (i, j) -> (i+1, j+1) diagonal; both
    # triangles listed counterclockwise.
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.vstack([lower, upper]).astype(np.int64)

    n_elem = elements.shape[0]
    element_areas = np.full(n_elem, 0.5 * h * h)
    element_diameters = np.full(n_elem, np.sqrt(2.0) * h)

    # P1 basis gradients from the unwrapped local geometry.  For vertices
    # P1, P2, P3 with area D:  grad chi_1 = ((y2 - y3), (x3 - x2)) / (2 D),
    # cyclically.  Unwrapped local coordinates per triangle type:
    #   lower: (0,0), (h,0), (h,h)   upper: (0,0), (h,h), (0,h)
    def grads(coords):
        x, y = coords[:, 0], coords[:, 1]
        two_area = (x[1] - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (y[1] - y[0])
        g = np.empty((3, 2))
        for k in range(3):
            a, b = (k + 1) % 3, (k + 2) % 3
            g[k, 0] = (y[a] - y[b]) / two_area
            g[k, 1] = (x[b] - x[a]) / two_area
        return g

    g_lower = grads(np.array([[0.0, 0.0], [h, 0.0], [h, h]]))
    g_upper = grads(np.array([[0.0, 0.0], [h, h], [0.0, h]]))
    basis_gradients = np.empty((n_elem, 3, 2))
    basis_gradients[: n * n] = g_lower
    basis_gradients[n * n :] = g_upper

    patch_areas = np.bincount(
        elements.ravel(),
        weights=np.repeat(element_areas, 3),
        minlength=n * n,
    )
    lumped_mass = patch_areas / 3.0

    for arr in (nodes, elements, element_areas, basis_gradients,
                element_diameters, patch_areas, lumped_mass):
        arr.setflags(write=False)

    return PeriodicMesh(
        L=float(L),
        n=n,
        nodes=nodes,
        elements=elements,
        element_areas=element_areas,
        basis_gradients=basis_gradients,
        element_diameters=element_diameters,
        patch_areas=patch_areas,
        lumped_mass=lumped_mass,
    )


def p1_gradient(mesh: PeriodicMesh, values: np.ndarray, e: int) -> np.ndarray:
    """Constant gradient of the P1 interpolant of ``values`` on element ``e``.

    Exact for data that is affine in the element's unwrapped coordinates.
    """
    values = np.asarray(values)
    if values.shape != (mesh.n_nodes,):
        raise ValueError(
            f"field has {values.shape} values, mesh has {mesh.n_nodes} nodes"
        )
    verts = mesh.elements[e]
    return mesh.basis_gradients[e].T @ values[verts]


def p1_gradients_all(mesh: PeriodicMesh, values: np.ndarray) -> np.ndarray:
    """Per-element gradients of the P1 interpolant, shape (n_elements, 2)."""
    vals = np.asarray(values)[mesh.elements]  # (E, 3)
    return np.einsum("evd,ev->ed", mesh.basis_gradients, vals)
