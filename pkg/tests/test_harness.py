import numpy as np
import pytest

from ternarych.cli import main
from ternarych.energy import Parameters, discrete_energy
from ternarych.harness import (
    EXIT_CONFIG,
    EXIT_OK,
    RunConfig,
    SERIES_COLUMNS,
    StudyConfig,
    convergence_study,
    load_run_config,
    parse_config_file,
    preset_initial_condition,
    read_snapshot,
    run,
    simulate,
    snapshot_text,
    write_convergence_report,
)
from ternarych.mesh import ConfigurationError, build_uniform_periodic_mesh


# -- presets -----------------------------------------------------------------


def test_ex61_nodal_values(mesh8):
    state = preset_initial_condition("ex61", mesh8)
    origin = np.flatnonzero(
        (mesh8.nodes[:, 0] == 0.0) & (mesh8.nodes[:, 1] == 0.0)
    )[0]
    assert state.phi1[origin] == pytest.approx(0.11, abs=1e-15)
    assert state.phi2[origin] == pytest.approx(0.51, abs=1e-15)
    quarter = np.flatnonzero(
        (mesh8.nodes[:, 0] == 0.25) & (mesh8.nodes[:, 1] == 0.0)
    )[0]
    assert state.phi1[quarter] == pytest.approx(0.1, abs=1e-15)
    assert state.phi2[quarter] == pytest.approx(0.5, abs=1e-15)


def test_ex62_nodal_values():
    mesh = build_uniform_periodic_mesh(64.0, 16)
    state = preset_initial_condition("ex62", mesh)
    origin = np.flatnonzero(
        (mesh.nodes[:, 0] == 0.0) & (mesh.nodes[:, 1] == 0.0)
    )[0]
    assert state.phi1[origin] == pytest.approx(0.11, abs=1e-15)
    node = np.flatnonzero(
        (mesh.nodes[:, 0] == 16.0) & (mesh.nodes[:, 1] == 0.0)
    )[0]
    expected = 0.1 + 0.01 * np.cos(3 * np.pi * 16 / 32)
    assert state.phi1[node] == pytest.approx(expected, abs=1e-15)


def test_ex63_seed_determinism(mesh8):
    a = preset_initial_condition("ex63", mesh8, seed=11)
    b = preset_initial_condition("ex63", mesh8, seed=11)
    c = preset_initial_condition("ex63", mesh8, seed=12)
    np.testing.assert_array_equal(a.phi1, b.phi1)
    np.testing.assert_array_equal(a.phi2, b.phi2)
    assert np.any(a.phi1 != c.phi1)
    # one shared noise field for both components (up to rounding of the sums)
    np.testing.assert_allclose(a.phi1 - 0.1, a.phi2 - 0.5, atol=3e-16)
    assert np.all(np.abs(a.phi1 - 0.1) <= 0.01)


def test_ex63_requires_seed(mesh8):
    with pytest.raises(ConfigurationError):
        preset_initial_condition("ex63", mesh8)


def test_expression_preset_and_domain_check(mesh8):
    state = preset_initial_condition(
        "expression", mesh8, expression=dict(base1=0.2, amp1=0.05, base2=0.4, amp2=0.0, kx=1, ky=2)
    )
    assert state.phi2.min() == state.phi2.max() == 0.4
    with pytest.raises(ConfigurationError):
        preset_initial_condition(
            "expression", mesh8, expression=dict(base1=0.5, amp1=0.6, base2=0.4)
        )


def test_unknown_preset_rejected(mesh8):
    with pytest.raises(ConfigurationError):
        preset_initial_condition("ex99", mesh8)


# -- config files ---------------------------------------------------------------


def write_config(path, **kv):
    lines = [f"{k} = {v}" for k, v in kv.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_parse_config_roundtrip(tmp_path):
    path = write_config(
        tmp_path / "run.cfg", L=1.0, n=8, tau=0.01, n_steps=3, preset="uniform"
    )
    raw = parse_config_file(path)
    assert raw["preset"] == "uniform"
    config = load_run_config(path)
    assert config.n == 8
    assert config.n_steps == 3
    assert config.params == Parameters()


def test_config_physical_parameters(tmp_path):
    path = write_config(
        tmp_path / "run.cfg",
        n=8, tau=0.01, n_steps=1, preset="uniform",
        D1=2.0, chi12=5.0, Ncoef=4.0, a1=0.5,
    )
    config = load_run_config(path)
    assert config.params.D1 == 2.0
    assert config.params.chi12 == 5.0
    assert config.params.N == 4.0
    assert config.params.a1 == 0.5


def test_config_T_consistency(tmp_path):
    ok = write_config(tmp_path / "a.cfg", n=8, tau=0.01, T=0.05, preset="uniform")
    assert load_run_config(ok).n_steps == 5
    bad = write_config(
        tmp_path / "b.cfg", n=8, tau=0.01, T=0.05, n_steps=7, preset="uniform"
    )
    with pytest.raises(ConfigurationError):
        load_run_config(bad)


def test_config_unknown_key_rejected(tmp_path):
    path = write_config(tmp_path / "c.cfg", n=8, tau=0.01, n_steps=1, bogus=3)
    with pytest.raises(ConfigurationError):
        load_run_config(path)


def test_config_requires_duration(tmp_path):
    path = write_config(tmp_path / "d.cfg", n=8, tau=0.01, preset="uniform")
    with pytest.raises(ConfigurationError):
        load_run_config(path)


# -- simulation and artifacts -----------------------------------------------


def test_uniform_run_is_stationary(tmp_path):
    config = RunConfig(
        L=1.0, n=8, tau=0.05, n_steps=2, preset="uniform", outdir=tmp_path
    )
    result = simulate(config)
    state = result.final_state
    assert np.abs(state.phi1 - 0.1).max() < 1e-12
    assert np.abs(state.phi2 - 0.5).max() < 1e-12
    mesh = build_uniform_periodic_mesh(1.0, 8)
    e0 = discrete_energy(
        mesh, preset_initial_condition("uniform", mesh), Parameters()
    ).total
    rows = [r.split(",") for r in result.series_rows]
    energies = [float(r[11]) for r in rows]
    assert all(abs(e - e0) < 1e-12 * abs(e0) for e in energies)


def test_run_writes_series_and_is_deterministic(tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    for out in (out_a, out_b):
        config = RunConfig(
            L=1.0, n=8, tau=0.01, n_steps=3, preset="ex63", seed=5,
            outdir=out, snapshot_times=(0.02,),
        )
        assert run(config) == EXIT_OK
    series_a = (out_a / "series.csv").read_text()
    series_b = (out_b / "series.csv").read_text()
    assert series_a == series_b
    header, *rows = series_a.splitlines()
    assert header == SERIES_COLUMNS
    assert len(rows) == 4  # step 0 plus three steps
    assert (out_a / "snapshot_phi1_t0.02.csv").exists()
    assert (out_a / "snapshot_phi2_t0.02.csv").exists()


def test_snapshot_round_trip(tmp_path, mesh8):
    rng = np.random.default_rng(0)
    values = rng.uniform(0.1, 0.2, mesh8.n_nodes)
    text = snapshot_text(mesh8, 0.125, "phi1", values)
    path = tmp_path / "snap.csv"
    path.write_text(text)
    header, parsed = read_snapshot(path)
    assert header["n"] == "8"
    assert header["field"] == "phi1"
    assert float(header["t"]) == 0.125
    rewritten = snapshot_text(mesh8, float(header["t"]), header["field"], parsed)
    assert rewritten == text


def test_series_column_order_is_stable():
    assert SERIES_COLUMNS.split(",") == [
        "step", "t", "mass1", "mass2", "mass3",
        "min1", "max1", "min2", "max2", "min3", "max3",
        "E_total", "E_entropy", "E_enthalpy", "E_gradient",
        "newton_iters", "residual",
    ]


# -- command line ---------------------------------------------------------------


def test_cli_run_ok(tmp_path):
    cfg = write_config(
        tmp_path / "run.cfg", n=8, tau=0.01, n_steps=2, preset="uniform"
    )
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == EXIT_OK
    assert (tmp_path / "out" / "series.csv").exists()


def test_cli_bad_config_exit_code(tmp_path):
    cfg = write_config(tmp_path / "run.cfg", n=8, tau=0.01, n_steps=2, preset="ex63")
    assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG  # missing seed
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG


def test_cli_seed_override(tmp_path):
    cfg = write_config(
        tmp_path / "run.cfg", n=8, tau=0.01, n_steps=1, preset="ex63"
    )
    out = tmp_path / "out"
    assert main([
        "run", "--config", str(cfg), "--out", str(out), "--seed", "9",
    ]) == EXIT_OK


def test_run_maps_invariant_violation_to_exit_code(tmp_path, monkeypatch):
    import ternarych.harness as harness

    def broken_simulate(config, collect_series=True):
        raise harness.InvariantViolation("forced for the exit-code contract")

    monkeypatch.setattr(harness, "simulate", broken_simulate)
    config = RunConfig(n=8, tau=0.01, n_steps=1, preset="uniform", outdir=tmp_path)
    assert harness.run(config) == 4


def test_run_maps_nonconvergence_to_exit_code(tmp_path, monkeypatch):
    import ternarych.harness as harness
    from ternarych.stepper import NonConvergence

    def broken_simulate(config, collect_series=True):
        raise NonConvergence("forced for the exit-code contract")

    monkeypatch.setattr(harness, "simulate", broken_simulate)
    config = RunConfig(n=8, tau=0.01, n_steps=1, preset="uniform", outdir=tmp_path)
    assert harness.run(config) == 3


def test_full_scale_override_wiring(tmp_path):
    from ternarych.harness import load_study_config

    cfg = write_config(tmp_path / "conv.cfg", n=64, T=0.02, ladder="16,32", preset="ex61")
    study = load_study_config(cfg, mode="temporal", overrides={"n": 256})
    assert study.n == 256
    assert load_study_config(cfg, mode="temporal").n == 64


def test_cli_converge_smoke(tmp_path):
    cfg = write_config(
        tmp_path / "conv.cfg", n=8, T=0.02, ladder="4,8,16", preset="ex61",
        a1=0.3, a2=0.3, a3=0.3,
    )
    out = tmp_path / "out"
    assert main([
        "converge", "--mode", "temporal", "--config", str(cfg), "--out", str(out),
    ]) == EXIT_OK
    assert (out / "convergence_temporal.csv").exists()


# -- convergence studies ----------------------------------------------------


def test_temporal_smoke_slopes():
    study = StudyConfig(mode="temporal", ladder=(4, 8, 16, 32), L=1.0, n=8, T=0.02)
    report = convergence_study(study)
    for c in ("phi1", "phi2", "phi3"):
        assert -1.6 < report.slopes_l2[c] < -0.4
    assert not report.degenerate
    assert len(report.errors_l2["phi1"]) == 3


def test_degenerate_ladder_flagged(tmp_path):
    # A uniform state is stationary at every resolution: all Cauchy errors
    # vanish and the slope fit must flag the degeneracy.
    study = StudyConfig(
        mode="temporal", ladder=(2, 4, 8), L=1.0, n=4, T=0.02, preset="uniform"
    )
    report = convergence_study(study)
    assert report.degenerate
    assert np.isnan(report.slopes_l2["phi1"])
    path = write_convergence_report(report, tmp_path)
    assert "degenerate" in path.read_text()


def test_non_nested_spatial_ladder_rejected():
    with pytest.raises(ConfigurationError):
        StudyConfig(mode="spatial", ladder=(8, 12), L=1.0)


def test_ladder_must_increase():
    with pytest.raises(ConfigurationError):
        StudyConfig(mode="temporal", ladder=(8, 8), L=1.0)


def test_spatial_smoke_runs():
    study = StudyConfig(mode="spatial", ladder=(4, 8, 16), L=1.0, tau=1e-4, n_steps=8)
    report = convergence_study(study)
    for c in ("phi1", "phi2", "phi3"):
        assert report.errors_l2[c][0] > report.errors_l2[c][-1] > 0.0
