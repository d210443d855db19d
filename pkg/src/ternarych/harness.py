"""Run driver: presets, time loops, diagnostics files, convergence studies.

Configs are flat key-value text files (``key = value`` per line, ``#``
comments).  A run writes a diagnostics CSV (one row every ``diag_every``
steps) and optional field snapshots; a convergence study runs a ladder of
temporal or spatial resolutions and fits least-squares error slopes from
the differences between adjacent rungs.

Exit codes for the command-line driver: 0 success, 2 configuration error,
3 solver non-convergence, 4 invariant violation detected by the harness's
own (stepper-independent) checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .energy import Parameters, State, discrete_energy
from .femcore import DiscreteOperators, lumped_inner_product
from .mesh import ConfigurationError, PeriodicMesh, build_uniform_periodic_mesh
from .stepper import NonConvergence, StepConfig, StepReport, Stepper

RNG_ALGORITHM = "numpy-PCG64"
MASS_DRIFT_RTOL = 1e-10

SERIES_COLUMNS = (
    "step,t,mass1,mass2,mass3,min1,max1,min2,max2,min3,max3,"
    "E_total,E_entropy,E_enthalpy,E_gradient,newton_iters,residual"
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGENCE = 3
EXIT_INVARIANT = 4

PRESETS = ("ex61", "ex62", "ex63", "uniform", "expression")


class InvariantViolation(RuntimeError):
    """A diagnostics row failed the harness's independent invariant checks."""


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# -- initial conditions -----------------------------------------------------


def preset_initial_condition(
    preset: str,
    mesh: PeriodicMesh,
    seed: int | None = None,
    expression: dict | None = None,
) -> State:
    """Nodal interpolation of one of the built-in initial conditions.

    ``ex61``: 0.1/0.5 backgrounds with a 0.01 cos(2 pi x) cos(2 pi y) ripple.
    ``ex62``: same backgrounds with a cos(3 pi x / 32) cos(3 pi y / 32) ripple.
    ``ex63``: 0.1 + r and 0.5 + r with one shared uniform random field
    r in [-0.01, 0.01] per node, reproducible from the mandatory seed
    (generator: numpy PCG64).
    ``uniform``: constant backgrounds.
    ``expression``: b_i + amp_i cos(2 pi kx x / L) cos(2 pi ky y / L).
    """
    x = mesh.nodes[:, 0]
    y = mesh.nodes[:, 1]
    if preset == "ex61":
        ripple = 0.01 * np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y)
        phi1, phi2 = 0.1 + ripple, 0.5 + ripple
    elif preset == "ex62":
        ripple = 0.01 * np.cos(3 * np.pi * x / 32) * np.cos(3 * np.pi * y / 32)
        phi1, phi2 = 0.1 + ripple, 0.5 + ripple
    elif preset == "ex63":
        if seed is None:
            raise ConfigurationError("preset ex63 requires a random seed")
        rng = np.random.Generator(np.random.PCG64(int(seed)))
        r = rng.uniform(-0.01, 0.01, size=mesh.n_nodes)
        phi1, phi2 = 0.1 + r, 0.5 + r
    elif preset == "uniform":
        opts = expression or {}
        phi1 = np.full(mesh.n_nodes, float(opts.get("base1", 0.1)))
        phi2 = np.full(mesh.n_nodes, float(opts.get("base2", 0.5)))
    elif preset == "expression":
        if not expression:
            raise ConfigurationError("preset expression requires coefficients")
        kx = float(expression.get("kx", 1.0))
        ky = float(expression.get("ky", 1.0))
        mode = np.cos(2 * np.pi * kx * x / mesh.L) * np.cos(2 * np.pi * ky * y / mesh.L)
        phi1 = float(expression.get("base1", 0.1)) + float(
            expression.get("amp1", 0.0)
        ) * mode
        phi2 = float(expression.get("base2", 0.5)) + float(
            expression.get("amp2", 0.0)
        ) * mode
    else:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {PRESETS}")

    state = State(phi1=phi1, phi2=phi2, time=0.0, step=0)
    if state.interior_margin() <= 0.0:
        raise ConfigurationError(
            f"initial condition {preset!r} leaves the Gibbs triangle"
        )
    return state


# -- configuration ----------------------------------------------------------


@dataclass
class RunConfig:
    """Everything needed to execute one simulation."""

    L: float = 1.0
    n: int = 64
    tau: float = 0.01
    n_steps: int = 100
    params: Parameters = field(default_factory=Parameters)
    preset: str = "ex61"
    seed: int | None = None
    outdir: Path = Path(".")
    snapshot_times: tuple[float, ...] = ()
    diag_every: int = 1
    expression: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tau <= 0 or self.n_steps < 0:
            raise ConfigurationError("tau must be positive and n_steps >= 0")
        if self.diag_every < 1:
            raise ConfigurationError("diag_every must be >= 1")
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.preset == "ex63" and self.seed is None:
            raise ConfigurationError("a seed is mandatory for random initial data")


@dataclass
class StudyConfig:
    """Settings for a temporal or spatial convergence ladder."""

    mode: str
    ladder: tuple[int, ...]
    L: float = 1.0
    n: int = 64
    tau: float = 7.8125e-6
    T: float = 0.02
    n_steps: int = 64
    params: Parameters = field(default_factory=lambda: Parameters(a1=0.3, a2=0.3, a3=0.3))
    preset: str = "ex61"
    seed: int | None = None
    outdir: Path = Path(".")

    def __post_init__(self):
        if self.mode not in ("temporal", "spatial"):
            raise ConfigurationError("mode must be 'temporal' or 'spatial'")
        if len(self.ladder) < 2:
            raise ConfigurationError("ladder needs at least two rungs")
        ladder = tuple(int(v) for v in self.ladder)
        if any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise ConfigurationError("ladder must be strictly increasing")
        if self.mode == "spatial":
            if any(b % a for a, b in zip(ladder, ladder[1:])):
                raise ConfigurationError(
                    "spatial ladder must be nested (each rung divides the next)"
                )
        self.ladder = ladder


_FLOAT_KEYS = {"L", "tau", "T", "D1", "D2", "chi12", "chi13", "chi23",
               "gamma", "Ncoef", "a1", "a2", "a3"}
_INT_KEYS = {"n", "n_steps", "seed", "diag_every"}
_EXPRESSION_KEYS = {"base1", "base2", "amp1", "amp2", "kx", "ky"}


def parse_config_file(path: str | Path) -> dict:
    """Read a flat key-value config file into a raw dict."""
    raw: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        raw[key] = value
    return raw


def _build_params(raw: dict) -> Parameters:
    kwargs = {}
    for key in ("D1", "D2", "chi12", "chi13", "chi23", "gamma", "a1", "a2", "a3"):
        if key in raw:
            kwargs[key] = float(raw[key])
    if "Ncoef" in raw:
        kwargs["N"] = float(raw["Ncoef"])
    try:
        return Parameters(**kwargs)
    except ValueError as exc:
        raise ConfigurationError(f"invalid physical parameters: {exc}") from exc


def load_run_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from a config file plus CLI overrides."""
    raw = parse_config_file(path)
    raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})

    known = _FLOAT_KEYS | _INT_KEYS | _EXPRESSION_KEYS | {
        "preset", "snapshot_times", "out", "ladder", "mode"
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")

    try:
        L = float(raw.get("L", 1.0))
        n = int(raw.get("n", 64))
        tau = float(raw.get("tau", 0.01))
        if "n_steps" in raw:
            n_steps = int(raw["n_steps"])
            if "T" in raw:
                T = float(raw["T"])
                if not math.isclose(T, n_steps * tau, rel_tol=1e-9, abs_tol=1e-12):
                    raise ConfigurationError(
                        f"inconsistent T={T} vs n_steps*tau={n_steps * tau}"
                    )
        elif "T" in raw:
            T = float(raw["T"])
            n_steps = round(T / tau)
            if not math.isclose(T, n_steps * tau, rel_tol=1e-9, abs_tol=1e-12):
                raise ConfigurationError(f"T={T} is not an integer multiple of tau={tau}")
        else:
            raise ConfigurationError("config must set n_steps or T")
        snapshot_times = tuple(
            float(v) for v in raw.get("snapshot_times", "").split(",") if v.strip()
        )
        expression = {k: float(raw[k]) for k in _EXPRESSION_KEYS if k in raw}
        return RunConfig(
            L=L,
            n=n,
            tau=tau,
            n_steps=n_steps,
            params=_build_params(raw),
            preset=raw.get("preset", "ex61"),
            seed=int(raw["seed"]) if "seed" in raw else None,
            outdir=Path(raw.get("out", ".")),
            snapshot_times=snapshot_times,
            diag_every=int(raw.get("diag_every", 1)),
            expression=expression,
        )
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config value: {exc}") from exc


def load_study_config(path: str | Path, mode: str, overrides: dict | None = None) -> StudyConfig:
    raw = parse_config_file(path)
    raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    if "ladder" not in raw:
        raise ConfigurationError("convergence config must set 'ladder'")
    try:
        ladder = tuple(int(v) for v in raw["ladder"].split(","))
        return StudyConfig(
            mode=mode,
            ladder=ladder,
            L=float(raw.get("L", 1.0)),
            n=int(raw.get("n", 64)),
            tau=float(raw.get("tau", 7.8125e-6)),
            T=float(raw.get("T", 0.02)),
            n_steps=int(raw.get("n_steps", 64)),
            params=_build_params(raw) if any(
                k in raw for k in _FLOAT_KEYS & {"D1", "D2", "chi12", "chi13",
                                                "chi23", "gamma", "Ncoef",
                                                "a1", "a2", "a3"}
            ) else Parameters(a1=0.3, a2=0.3, a3=0.3),
            preset=raw.get("preset", "ex61"),
            seed=int(raw["seed"]) if "seed" in raw else None,
            outdir=Path(raw.get("out", ".")),
        )
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config value: {exc}") from exc


# -- simulation loop --------------------------------------------------------


@dataclass
class RunResult:
    """In-memory product of a simulation."""

    final_state: State
    series_rows: list[str]
    snapshots: list[tuple[Path, str]]  # (path, content) pairs, unwritten


def _series_row(step: int, t: float, report) -> str:
    values = (
        [t]
        + list(report.masses)
        + [
            report.minima[0], report.maxima[0],
            report.minima[1], report.maxima[1],
            report.minima[2], report.maxima[2],
        ]
        + [
            report.energy.total,
            report.energy.entropy_part,
            report.energy.enthalpy_part,
            report.energy.gradient_part,
        ]
    )
    cells = [str(step)] + [_fmt(v) for v in values]
    cells.append(str(report.newton_iters))
    cells.append(_fmt(report.final_residual))
    return ",".join(cells)


def _initial_report(mesh, state, params):
    ones = np.ones(mesh.n_nodes)
    phi3 = state.phi3
    return StepReport(
        masses=(
            lumped_inner_product(mesh, state.phi1, ones),
            lumped_inner_product(mesh, state.phi2, ones),
            lumped_inner_product(mesh, phi3, ones),
        ),
        minima=(float(state.phi1.min()), float(state.phi2.min()), float(phi3.min())),
        maxima=(float(state.phi1.max()), float(state.phi2.max()), float(phi3.max())),
        energy=discrete_energy(mesh, state, params),
        newton_iters=0,
        final_residual=0.0,
        tau_used=0.0,
    )


def snapshot_text(mesh: PeriodicMesh, t: float, name: str, values: np.ndarray) -> str:
    lines = [
        f"# n={mesh.n} L={_fmt(mesh.L)} t={_fmt(t)} field={name}",
        f"# generator={RNG_ALGORITHM} order=row-major",
    ]
    lines.extend(_fmt(v) for v in values)
    return "\n".join(lines) + "\n"


def read_snapshot(path: str | Path) -> tuple[dict, np.ndarray]:
    """Parse a snapshot file back into its header fields and values."""
    lines = Path(path).read_text().splitlines()
    header = {}
    for part in lines[0].lstrip("# ").split():
        key, value = part.split("=", 1)
        header[key] = value
    values = np.array([float(v) for v in lines[2:]])
    return header, values


def simulate(config: RunConfig, collect_series: bool = True) -> RunResult:
    """Run the time loop; raises on solver failure or invariant violation."""
    mesh = build_uniform_periodic_mesh(config.L, config.n)
    ops = DiscreteOperators(mesh)
    state = preset_initial_condition(
        config.preset, mesh, seed=config.seed, expression=config.expression
    )
    stepper = Stepper(ops, config.params, StepConfig(tau=config.tau))

    mass0 = (
        lumped_inner_product(mesh, state.phi1, np.ones(mesh.n_nodes)),
        lumped_inner_product(mesh, state.phi2, np.ones(mesh.n_nodes)),
    )

    rows: list[str] = []
    snapshots: list[tuple[Path, str]] = []
    pending_snaps = sorted(config.snapshot_times)

    def check_and_record(step_idx: int, t: float, report):
        if min(report.minima) <= 0.0 or max(report.maxima) >= 1.0:
            raise InvariantViolation(
                f"positivity violated in diagnostics at step {step_idx}"
            )
        for m_now, m_ref in zip(report.masses[:2], mass0):
            if abs(m_now - m_ref) > MASS_DRIFT_RTOL * max(abs(m_ref), 1e-30):
                raise InvariantViolation(
                    f"mass drift beyond tolerance at step {step_idx}"
                )
        if collect_series:
            rows.append(_series_row(step_idx, t, report))

    def maybe_snapshot(t: float, state: State):
        while pending_snaps and t >= pending_snaps[0] - 0.5 * config.tau:
            t_snap = pending_snaps.pop(0)
            for name, vals in (("phi1", state.phi1), ("phi2", state.phi2)):
                fname = config.outdir / f"snapshot_{name}_t{t_snap:g}.csv"
                snapshots.append((fname, snapshot_text(mesh, t, name, vals)))

    report0 = _initial_report(mesh, state, config.params)
    check_and_record(0, 0.0, report0)
    maybe_snapshot(0.0, state)

    for k in range(1, config.n_steps + 1):
        try:
            state, report = stepper.step(state)
        except NonConvergence as exc:
            raise NonConvergence(f"step {k}: {exc}") from exc
        t = k * config.tau
        if k % config.diag_every == 0 or k == config.n_steps:
            check_and_record(k, t, report)
        maybe_snapshot(t, state)

    return RunResult(final_state=state, series_rows=rows, snapshots=snapshots)


def run(config: RunConfig) -> int:
    """Execute a run and write artifacts; returns a process exit code."""
    try:
        config.outdir.mkdir(parents=True, exist_ok=True)
        result = simulate(config)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}")
        return EXIT_CONFIG
    except NonConvergence as exc:
        print(f"solver failure: {exc}")
        return EXIT_NONCONVERGENCE
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}")
        return EXIT_INVARIANT

    series = config.outdir / "series.csv"
    series.write_text(SERIES_COLUMNS + "\n" + "\n".join(result.series_rows) + "\n")
    for path, content in result.snapshots:
        path.write_text(content)
    return EXIT_OK


# -- convergence studies ----------------------------------------------------


@dataclass
class ConvergenceReport:
    """Adjacent-rung Cauchy errors and fitted slopes."""

    mode: str
    resolutions: tuple[int, ...]  # coarser rung of each adjacent pair
    errors_l2: dict  # component name -> list of errors
    errors_linf: dict
    slopes_l2: dict  # component name -> fitted slope (nan if degenerate)
    slopes_linf: dict
    degenerate: bool


_COMPONENTS = ("phi1", "phi2", "phi3")


def _state_components(state: State):
    return {"phi1": state.phi1, "phi2": state.phi2, "phi3": state.phi3}


def _fit_slopes(resolutions, errors):
    slopes = {}
    degenerate = False
    logr = np.log(np.asarray(resolutions, dtype=float))
    centered = logr - logr.mean()
    spread = float(centered @ centered)
    for name, errs in errors.items():
        errs = np.asarray(errs, dtype=float)
        # A slope needs at least two adjacent-rung error points, all positive.
        if np.any(errs <= 0.0) or spread == 0.0:
            slopes[name] = float("nan")
            degenerate = True
            continue
        loge = np.log(errs)
        slopes[name] = float(centered @ (loge - loge.mean()) / spread)
    return slopes, degenerate


def convergence_study(study: StudyConfig) -> ConvergenceReport:
    """Run the ladder, compute adjacent-rung errors and least-squares slopes."""
    errors_l2 = {c: [] for c in _COMPONENTS}
    errors_linf = {c: [] for c in _COMPONENTS}

    if study.mode == "temporal":
        mesh = build_uniform_periodic_mesh(study.L, study.n)
        finals = []
        for n_t in study.ladder:
            config = RunConfig(
                L=study.L,
                n=study.n,
                tau=study.T / n_t,
                n_steps=n_t,
                params=study.params,
                preset=study.preset,
                seed=study.seed,
            )
            finals.append(simulate(config, collect_series=False).final_state)
        for coarse, fine in zip(finals, finals[1:]):
            a, b = _state_components(coarse), _state_components(fine)
            for c in _COMPONENTS:
                diff = a[c] - b[c]
                errors_linf[c].append(float(np.max(np.abs(diff))))
                errors_l2[c].append(
                    float(np.sqrt(np.dot(mesh.lumped_mass, diff**2)))
                )
        pair_res = study.ladder[:-1]
    else:
        finals = {}
        meshes = {}
        for n in study.ladder:
            config = RunConfig(
                L=study.L,
                n=n,
                tau=study.tau,
                n_steps=study.n_steps,
                params=study.params,
                preset=study.preset,
                seed=study.seed,
            )
            finals[n] = simulate(config, collect_series=False).final_state
            meshes[n] = build_uniform_periodic_mesh(study.L, n)
        for n_c, n_f in zip(study.ladder, study.ladder[1:]):
            ratio = n_f // n_c
            a = _state_components(finals[n_c])
            b = _state_components(finals[n_f])
            mesh_c = meshes[n_c]
            for c in _COMPONENTS:
                fine_grid = b[c].reshape(n_f, n_f)[::ratio, ::ratio].ravel()
                diff = a[c] - fine_grid
                errors_linf[c].append(float(np.max(np.abs(diff))))
                errors_l2[c].append(
                    float(np.sqrt(np.dot(mesh_c.lumped_mass, diff**2)))
                )
        pair_res = study.ladder[:-1]

    slopes_l2, degen_a = _fit_slopes(pair_res, errors_l2)
    slopes_linf, degen_b = _fit_slopes(pair_res, errors_linf)
    return ConvergenceReport(
        mode=study.mode,
        resolutions=tuple(pair_res),
        errors_l2=errors_l2,
        errors_linf=errors_linf,
        slopes_l2=slopes_l2,
        slopes_linf=slopes_linf,
        degenerate=degen_a or degen_b,
    )


def write_convergence_report(report: ConvergenceReport, outdir: Path) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"convergence_{report.mode}.csv"
    header = "resolution," + ",".join(
        [f"err_l2_{c}" for c in _COMPONENTS] + [f"err_linf_{c}" for c in _COMPONENTS]
    )
    lines = [header]
    for k, res in enumerate(report.resolutions):
        cells = [str(res)]
        cells += [_fmt(report.errors_l2[c][k]) for c in _COMPONENTS]
        cells += [_fmt(report.errors_linf[c][k]) for c in _COMPONENTS]
        lines.append(",".join(cells))
    lines.append(
        "# slopes_l2 "
        + " ".join(f"{c}={report.slopes_l2[c]:.6g}" for c in _COMPONENTS)
    )
    lines.append(
        "# slopes_linf "
        + " ".join(f"{c}={report.slopes_linf[c]:.6g}" for c in _COMPONENTS)
    )
    if report.degenerate:
        lines.append("# degenerate: identical fields across at least one rung pair")
    path.write_text("\n".join(lines) + "\n")
    return path
