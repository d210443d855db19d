"""Discrete operators on the periodic P1 space.

Fields are plain float arrays with one value per mesh node.  The inner
product everywhere is the vertex-quadrature (mass-lumped) one,

    (psi, eta)_Q = sum_j m_j psi_j eta_j,    m_j = patch_area(j) / 3,

which diagonalizes the mass matrix.  The discrete Laplacian is defined
against that inner product, (Lap v, chi)_Q = -(grad v, grad chi) for all
P1 basis functions chi, and its zero-mean inverse induces the discrete
H^-1 norm used by the gradient-flow time stepper.

The stiffness matrix of the uniform periodic triangulation is circulant
(the stencil is translation invariant), so the zero-mean Poisson solve is
performed exactly in Fourier space.  Every solve is verified a posteriori
against the assembled stiffness matrix at 1e-12 relative residual, after
one iterative-refinement pass.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .mesh import PeriodicMesh

MEAN_ZERO_RTOL = 1e-11
SOLVER_RTOL = 1e-12


class MeshMismatchError(ValueError):
    """Raised when a nodal field does not match the mesh node count."""


class NonZeroMeanError(ValueError):
    """Raised when an operation requires a lumped-mean-zero field."""


class SolverFailure(RuntimeError):
    """Raised when a linear solve misses its residual tolerance."""


def _check_field(mesh: PeriodicMesh, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_nodes,):
        raise MeshMismatchError(
            f"field has shape {values.shape}, mesh has {mesh.n_nodes} nodes"
        )
    return values


def lumped_inner_product(mesh: PeriodicMesh, psi: np.ndarray, eta: np.ndarray) -> float:
    """Vertex-quadrature inner product (psi, eta)_Q."""
    psi = _check_field(mesh, psi)
    eta = _check_field(mesh, eta)
    return float(np.dot(mesh.lumped_mass, psi * eta))


def lumped_norm(mesh: PeriodicMesh, psi: np.ndarray) -> float:
    """Norm induced by the lumped inner product."""
    return float(np.sqrt(max(lumped_inner_product(mesh, psi, psi), 0.0)))


def lumped_mean(mesh: PeriodicMesh, psi: np.ndarray) -> float:
    """(psi, 1)_Q / |Omega|."""
    psi = _check_field(mesh, psi)
    return float(np.dot(mesh.lumped_mass, psi) / mesh.area)


def project_zero_mean(mesh: PeriodicMesh, psi: np.ndarray) -> np.ndarray:
    """Subtract the lumped mean, returning a field with (v, 1)_Q = 0."""
    psi = _check_field(mesh, psi)
    return psi - lumped_mean(mesh, psi)


def element_average(mesh: PeriodicMesh, values: np.ndarray, e: int) -> float:
    """Arithmetic mean of the three vertex values of element ``e``."""
    values = _check_field(mesh, values)
    return float(np.mean(values[mesh.elements[e]]))


def element_averages(mesh: PeriodicMesh, values: np.ndarray) -> np.ndarray:
    """Vertex means on every element, shape (n_elements,)."""
    values = _check_field(mesh, values)
    return values[mesh.elements].mean(axis=1)


def assemble_stiffness(mesh: PeriodicMesh) -> sp.csr_matrix:
    """Assemble the P1 stiffness matrix K with (K v)_j = (grad v, grad chi_j).

    K is symmetric positive semidefinite with kernel spanned by the
    constant field (zero row sums).
    """
    grads = mesh.basis_gradients  # (E, 3, 2)
    local = np.einsum("evd,ewd->evw", grads, grads) * mesh.element_areas[:, None, None]
    elems = mesh.elements
    rows = np.repeat(elems, 3, axis=1).ravel()
    cols = np.tile(elems, (1, 3)).ravel()
    K = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    ).tocsr()
    K.sum_duplicates()
    return K


class DiscreteOperators:
    """Cached operators for one mesh: stiffness, Laplacian, H^-1 machinery.

    The zero-mean Poisson solve uses the fact that the stiffness matrix of
    this uniform periodic mesh is circulant: its symbol is obtained by
    applying K to a delta field and taking a 2-D FFT.  Solves are checked
    against the assembled K and raise :class:`SolverFailure` above 1e-12
    relative residual.
    """

    def __init__(self, mesh: PeriodicMesh):
        self.mesh = mesh
        self.stiffness = assemble_stiffness(mesh)
        n = mesh.n
        delta = np.zeros(mesh.n_nodes)
        delta[0] = 1.0
        symbol = np.fft.fft2((self.stiffness @ delta).reshape(n, n))
        if np.max(np.abs(symbol.imag)) > 1e-9 * np.max(np.abs(symbol.real)):
            raise SolverFailure("stiffness matrix is not circulant on this mesh")
        self._symbol = symbol.real
        self._symbol_safe = self._symbol.copy()
        self._symbol_safe[0, 0] = 1.0  # zero mode handled by projection

    # -- basic lumped-space helpers ------------------------------------

    def inner(self, psi: np.ndarray, eta: np.ndarray) -> float:
        return lumped_inner_product(self.mesh, psi, eta)

    def norm(self, psi: np.ndarray) -> float:
        return lumped_norm(self.mesh, psi)

    def mean(self, psi: np.ndarray) -> float:
        return lumped_mean(self.mesh, psi)

    def project(self, psi: np.ndarray) -> np.ndarray:
        return project_zero_mean(self.mesh, psi)

    # -- Laplacian and its zero-mean inverse ---------------------------

    def laplacian(self, values: np.ndarray) -> np.ndarray:
        """Lumped discrete Laplacian, -(K v) / m; lumped-mean-zero output."""
        values = _check_field(self.mesh, values)
        return -(self.stiffness @ values) / self.mesh.lumped_mass

    def _poisson_zero_sum(self, b: np.ndarray) -> np.ndarray:
        """Solve K u = b for zero-sum b, returning the zero-sum solution."""
        n = self.mesh.n

        def solve(rhs):
            rhat = np.fft.fft2(rhs.reshape(n, n)) / self._symbol_safe
            rhat[0, 0] = 0.0
            return np.fft.ifft2(rhat).real.ravel()

        u = solve(b)
        u += solve(b - self.stiffness @ u)  # one refinement pass
        return u

    def inverse_laplacian(self, w: np.ndarray) -> np.ndarray:
        """Zero-mean solution u of  -Lap u = w  for lumped-mean-zero w.

        Raises
        ------
        NonZeroMeanError
            If |(w, 1)_Q| exceeds the mean-zero tolerance.
        SolverFailure
            If the verified relative residual exceeds 1e-12.
        """
        w = _check_field(self.mesh, w)
        wnorm = self.norm(w)
        mean_q = abs(np.dot(self.mesh.lumped_mass, w))
        if mean_q > MEAN_ZERO_RTOL * wnorm * np.sqrt(self.mesh.area):
            raise NonZeroMeanError(
                f"(w, 1)_Q = {mean_q:.3e} exceeds mean-zero tolerance"
            )
        if wnorm == 0.0:
            return np.zeros_like(w)

        b = self.mesh.lumped_mass * w
        b = b - b.sum() / b.size  # exact zero-sum rhs (deflate constants)
        u = self._poisson_zero_sum(b)
        rel = np.linalg.norm(self.stiffness @ u - b) / np.linalg.norm(b)
        if rel > SOLVER_RTOL:
            raise SolverFailure(f"Poisson solve residual {rel:.3e} > {SOLVER_RTOL}")
        return self.project(u)

    def h_minus1_norm(self, w: np.ndarray) -> float:
        """Discrete H^-1 norm sqrt((w, (-Lap)^{-1} w)_Q) of a mean-zero field."""
        u = self.inverse_laplacian(w)
        return float(np.sqrt(max(self.inner(w, u), 0.0)))
