"""Mass-lumped P1 finite element solver for ternary Cahn-Hilliard dynamics
with Flory-Huggins-deGennes energy: positivity preserving, mass conserving,
and unconditionally energy stable by convex-concave time splitting."""

from .energy import (
    DegenerateElement,
    DomainViolation,
    EnergyBreakdown,
    Parameters,
    State,
    assemble_dk_residual,
    dh_dphi,
    discrete_energy,
    ds_dphi,
    enthalpy_density,
    entropy_density,
    gradient_energy,
)
from .femcore import (
    DiscreteOperators,
    MeshMismatchError,
    NonZeroMeanError,
    SolverFailure,
    assemble_stiffness,
    element_average,
    lumped_inner_product,
)
from .harness import (
    ConvergenceReport,
    RunConfig,
    StudyConfig,
    convergence_study,
    preset_initial_condition,
    run,
    simulate,
)
from .mesh import ConfigurationError, PeriodicMesh, build_uniform_periodic_mesh, p1_gradient
from .stepper import (
    InvalidPreviousState,
    NonConvergence,
    StepConfig,
    StepReport,
    Stepper,
    recover_chemical_potentials,
    scheme_residual,
    step,
)

__all__ = [
    "ConfigurationError",
    "ConvergenceReport",
    "DegenerateElement",
    "DiscreteOperators",
    "DomainViolation",
    "EnergyBreakdown",
    "InvalidPreviousState",
    "MeshMismatchError",
    "NonConvergence",
    "NonZeroMeanError",
    "Parameters",
    "PeriodicMesh",
    "RunConfig",
    "SolverFailure",
    "State",
    "StepConfig",
    "StepReport",
    "Stepper",
    "StudyConfig",
    "assemble_dk_residual",
    "assemble_stiffness",
    "build_uniform_periodic_mesh",
    "convergence_study",
    "dh_dphi",
    "discrete_energy",
    "ds_dphi",
    "element_average",
    "enthalpy_density",
    "entropy_density",
    "gradient_energy",
    "lumped_inner_product",
    "p1_gradient",
    "preset_initial_condition",
    "recover_chemical_potentials",
    "run",
    "scheme_residual",
    "simulate",
    "step",
]

__version__ = "0.1.0"
