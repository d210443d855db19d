"""Flory-Huggins-deGennes free energy of the ternary mixture.

The composition is described by the volume fractions phi1 (microspheres)
and phi2 (polymer chains); the solvent fraction is always the derived
phi3 = 1 - phi1 - phi2.  Admissible states live strictly inside the Gibbs
triangle {phi1 > 0, phi2 > 0, phi1 + phi2 < 1}.

The discrete energy on the P1 mesh has three parts:

* mixing entropy, evaluated nodewise under the lumped inner product:
      S = (phi1/gamma) ln(alpha phi1 / gamma)
        + (phi2/N)     ln(beta  phi2 / N)
        + phi3 ln(phi3)
* mixing enthalpy, also lumped:
      H = chi12 phi1 phi2 + chi13 phi1 phi3 + chi23 phi2 phi3
* deGennes gradient energy with element-averaged coefficients, integrated
  exactly (gradients and averages are constant per element):
      sum_e area_e * sum_l (a_l^2 / 36) |grad phi_l|^2 / avg(phi_l)

Entropy plus gradient energy is convex, the enthalpy is concave when
4 chi13 chi23 > (chi12 - chi13 - chi23)^2; that concavity condition is
enforced at Parameters construction time because the convex-concave time
splitting depends on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .femcore import element_averages, lumped_inner_product
from .mesh import PeriodicMesh, p1_gradients_all


class DomainViolation(ValueError):
    """Raised when a composition leaves the open Gibbs triangle."""


class DegenerateElement(ValueError):
    """Raised when an element average of a phase fraction is not positive."""


@dataclass(frozen=True)
class Parameters:
    """Physical constants of the model; defaults are the reference set.

    ``N`` is the polymerization degree of the chains, ``gamma`` the
    relative microsphere volume; ``alpha`` and ``beta`` are derived from
    them.  ``a1, a2, a3`` are statistical segment lengths entering the
    deGennes gradient coefficients ``a_i^2 / (36 phi_i)``.
    """

    D1: float = 1.0
    D2: float = 1.0
    chi12: float = 4.0
    chi13: float = 10.0
    chi23: float = 1.6
    gamma: float = 0.16
    N: float = 5.12
    a1: float = 1.0
    a2: float = 1.0
    a3: float = 1.0
    alpha: float = field(init=False)
    beta: float = field(init=False)

    def __post_init__(self):
        if self.D1 <= 0 or self.D2 <= 0:
            raise DomainViolation("mobilities D1, D2 must be positive")
        if self.gamma <= 0 or self.N <= 0:
            raise DomainViolation("gamma and N must be positive")
        if min(self.a1, self.a2, self.a3) < 0:
            raise DomainViolation("segment lengths must be nonnegative")
        if self.concavity_margin() <= 0:
            raise DomainViolation(
                "enthalpy is not concave: need 4*chi13*chi23 >"
                " (chi12 - chi13 - chi23)^2"
            )
        alpha = math.pi * (math.sqrt(self.gamma / math.pi) + self.N / 2.0) ** 2
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", alpha / math.sqrt(math.pi * self.N))

    def concavity_margin(self) -> float:
        """4 chi13 chi23 - (chi12 - chi13 - chi23)^2; must be positive."""
        return 4.0 * self.chi13 * self.chi23 - (
            self.chi12 - self.chi13 - self.chi23
        ) ** 2


@dataclass(frozen=True)
class State:
    """Pair of phase fields at one time level; phi3 is always derived."""

    phi1: np.ndarray
    phi2: np.ndarray
    time: float = 0.0
    step: int = 0

    @property
    def phi3(self) -> np.ndarray:
        return 1.0 - self.phi1 - self.phi2

    def interior_margin(self) -> float:
        """Smallest distance of any nodal value to the Gibbs boundary."""
        return float(
            min(self.phi1.min(), self.phi2.min(), self.phi3.min())
        )

    def is_interior(self) -> bool:
        return self.interior_margin() > 0.0


@dataclass(frozen=True)
class EnergyBreakdown:
    """Discrete energy split into its parts and its convex-concave halves."""

    entropy_part: float
    enthalpy_part: float
    gradient_part: float
    total: float
    convex_total: float
    concave_total: float


def _check_interior(phi1, phi2):
    phi3 = 1.0 - phi1 - phi2
    if np.min(phi1) <= 0.0 or np.min(phi2) <= 0.0 or np.min(phi3) <= 0.0:
        raise DomainViolation(
            "composition must satisfy phi1 > 0, phi2 > 0, phi1 + phi2 < 1"
        )
    return phi3


def entropy_density(phi1, phi2, params: Parameters):
    """Mixing entropy S(phi1, phi2); strictly interior input required."""
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    phi3 = _check_interior(phi1, phi2)
    out = (
        phi1 / params.gamma * np.log(params.alpha * phi1 / params.gamma)
        + phi2 / params.N * np.log(params.beta * phi2 / params.N)
        + phi3 * np.log(phi3)
    )
    return out if out.ndim else float(out)


def enthalpy_density(phi1, phi2, params: Parameters):
    """Mixing enthalpy H(phi1, phi2); polynomial, defined everywhere."""
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    phi3 = 1.0 - phi1 - phi2
    out = (
        params.chi12 * phi1 * phi2
        + params.chi13 * phi1 * phi3
        + params.chi23 * phi2 * phi3
    )
    return out if out.ndim else float(out)


def ds_dphi(i: int, phi1, phi2, params: Parameters):
    """Partial derivative of the entropy w.r.t. phi_i, i in {1, 2}."""
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    phi3 = _check_interior(phi1, phi2)
    log3 = np.log(phi3)
    if i == 1:
        out = (
            np.log(params.alpha * phi1 / params.gamma) / params.gamma
            + 1.0 / params.gamma - 1.0 - log3
        )
    elif i == 2:
        out = (
            np.log(params.beta * phi2 / params.N) / params.N
            + 1.0 / params.N - 1.0 - log3
        )
    else:
        raise ValueError(f"component must be 1 or 2, got {i}")
    return out if out.ndim else float(out)


def dh_dphi(i: int, phi1, phi2, params: Parameters):
    """Partial derivative of the enthalpy w.r.t. phi_i; affine in (phi1, phi2)."""
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    cross = params.chi12 - params.chi13 - params.chi23
    if i == 1:
        out = -2.0 * params.chi13 * phi1 + cross * phi2 + params.chi13
    elif i == 2:
        out = -2.0 * params.chi23 * phi2 + cross * phi1 + params.chi23
    else:
        raise ValueError(f"component must be 1 or 2, got {i}")
    return out if out.ndim else float(out)


def _element_data(mesh: PeriodicMesh, phi1: np.ndarray, phi2: np.ndarray):
    """Per-element averages and gradients of all three fractions.

    The third-component average is formed as 1 - avg1 - avg2, which is
    exact by linearity and keeps the hyperplane link tight.
    """
    avg1 = element_averages(mesh, phi1)
    avg2 = element_averages(mesh, phi2)
    avg3 = 1.0 - avg1 - avg2
    if np.min(avg1) <= 0.0 or np.min(avg2) <= 0.0 or np.min(avg3) <= 0.0:
        raise DegenerateElement("element average of a phase fraction is <= 0")
    g1 = p1_gradients_all(mesh, phi1)
    g2 = p1_gradients_all(mesh, phi2)
    g3 = -(g1 + g2)
    return (avg1, avg2, avg3), (g1, g2, g3)


def gradient_energy(mesh: PeriodicMesh, phi1, phi2, params: Parameters) -> float:
    """Element-averaged deGennes gradient energy, integrated exactly."""
    avgs, grads = _element_data(mesh, np.asarray(phi1, float), np.asarray(phi2, float))
    coeffs = (params.a1**2 / 36.0, params.a2**2 / 36.0, params.a3**2 / 36.0)
    density = sum(
        c * np.einsum("ed,ed->e", g, g) / a
        for c, g, a in zip(coeffs, grads, avgs)
    )
    return float(np.dot(mesh.element_areas, density))


def gradient_energy_terms(mesh: PeriodicMesh, phi1, phi2, params: Parameters):
    """Gradient energy together with both residual vectors.

    Shares one pass of element averages and gradients between the energy
    value and the two variational-derivative assemblies; the time stepper
    evaluates all three at every Newton iterate.
    """
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    (avg1, avg2, avg3), (g1, g2, g3) = _element_data(mesh, phi1, phi2)
    areas = mesh.element_areas
    grads = mesh.basis_gradients

    sq1 = np.einsum("ed,ed->e", g1, g1)
    sq2 = np.einsum("ed,ed->e", g2, g2)
    sq3 = np.einsum("ed,ed->e", g3, g3)
    density = (
        params.a1**2 / 36.0 * sq1 / avg1
        + params.a2**2 / 36.0 * sq2 / avg2
        + params.a3**2 / 36.0 * sq3 / avg3
    )
    energy = float(np.dot(areas, density))

    third_mass = params.a3**2 * sq3 / (36.0 * avg3**2)
    third_flux = (params.a3**2 / (18.0 * avg3))[:, None] * g3
    residuals = []
    for a_own, avg, g, sq in ((params.a1, avg1, g1, sq1), (params.a2, avg2, g2, sq2)):
        mass_const = -(a_own**2) * sq / (36.0 * avg**2) + third_mass
        flux = (a_own**2 / (18.0 * avg))[:, None] * g - third_flux
        contrib = (areas / 3.0 * mass_const)[:, None] + areas[:, None] * np.einsum(
            "evd,ed->ev", grads, flux
        )
        residuals.append(
            np.bincount(
                mesh.elements.ravel(), weights=contrib.ravel(), minlength=mesh.n_nodes
            )
        )
    return energy, residuals[0], residuals[1]


def discrete_energy(mesh: PeriodicMesh, state: State, params: Parameters) -> EnergyBreakdown:
    """Total discrete energy with its convex-concave decomposition."""
    ones = np.ones(mesh.n_nodes)
    s_part = lumped_inner_product(
        mesh, entropy_density(state.phi1, state.phi2, params), ones
    )
    h_part = lumped_inner_product(
        mesh, enthalpy_density(state.phi1, state.phi2, params), ones
    )
    k_part = gradient_energy(mesh, state.phi1, state.phi2, params)
    convex = s_part + k_part
    concave = -h_part
    return EnergyBreakdown(
        entropy_part=s_part,
        enthalpy_part=h_part,
        gradient_part=k_part,
        total=s_part + h_part + k_part,
        convex_total=convex,
        concave_total=concave,
    )


def assemble_dk_residual(
    mesh: PeriodicMesh, i: int, phi1, phi2, params: Parameters
) -> np.ndarray:
    """Nodal residual vector of the gradient-energy variation for phi_i.

    Entry j is the exact integral pairing of the variational derivative of
    the element-averaged gradient energy with the nodal basis function
    chi_j: r_j = d/ds [gradient_energy(phi_i + s chi_j)] at s = 0.  The
    integrands are elementwise constants times chi_j (mass-like terms,
    weight area/3 per vertex) or constants dotted with grad chi_j
    (stiffness-like terms), so no quadrature error is incurred.
    """
    if i not in (1, 2):
        raise ValueError(f"component must be 1 or 2, got {i}")
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    (avg1, avg2, avg3), (g1, g2, g3) = _element_data(mesh, phi1, phi2)
    own_avg, own_g = (avg1, g1) if i == 1 else (avg2, g2)
    a_own = params.a1 if i == 1 else params.a2

    areas = mesh.element_areas
    grads = mesh.basis_gradients  # (E, 3, 2)

    # Constant per element for the mass-like terms.
    own_sq = np.einsum("ed,ed->e", own_g, own_g)
    third_sq = np.einsum("ed,ed->e", g3, g3)
    mass_const = (
        -(a_own**2) * own_sq / (36.0 * own_avg**2)
        + params.a3**2 * third_sq / (36.0 * avg3**2)
    )
    mass_contrib = (areas / 3.0 * mass_const)[:, None] * np.ones((1, 3))

    # Constant 2-vector per element for the stiffness-like terms.
    flux = (
        (a_own**2 / (18.0 * own_avg))[:, None] * own_g
        - (params.a3**2 / (18.0 * avg3))[:, None] * g3
    )
    stiff_contrib = areas[:, None] * np.einsum("evd,ed->ev", grads, flux)

    contrib = (mass_contrib + stiff_contrib).ravel()
    return np.bincount(mesh.elements.ravel(), weights=contrib, minlength=mesh.n_nodes)
