from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fibre_adiabatic.harness import (
    ConfigError,
    ExperimentConfig,
    RateFitError,
    fit_rate,
    load_config,
    parse_config,
)
from fibre_adiabatic.harness.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, main
from fibre_adiabatic.harness.config import EnergyCut
from fibre_adiabatic.harness.experiments import run_experiment
from fibre_adiabatic.harness.report import SpectralReport, at_least, at_most, format_csv, within, write_report
from fibre_adiabatic.harness.verify import INVARIANTS

SMALL = """
[numerics]
n_x = 32
n_z = 8
projection_n_x = 32
projection_n_z = 8
dynamics_n_x = 32
dynamics_n_z = 8
guard_tol = 1.0

[sweep]
epsilon = [0.2, 0.141, 0.1, 0.071]
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def body(path):
    return "".join(line for line in path.read_text().splitlines(True) if not line.startswith("#"))


# config ------------------------------------------------------------------------


def test_minimal_config_has_defaults():
    cfg = parse_config('[model]\nkind = "strip"\n')
    assert cfg == ExperimentConfig()
    assert cfg.model.profile == "0.25 + 0.1*cos(x)"
    assert cfg.sweep.epsilon == (0.2, 0.141, 0.1, 0.071, 0.05)
    assert cfg.sweep.window == EnergyCut("Lambda1", -0.5)
    assert (cfg.numerics.n_x, cfg.numerics.n_z) == (256, 32)


def test_full_config_round_trip():
    cfg = parse_config(
        '[model]\nkind = "warped"\nprofile = "2*pi*(1 + 0.2*cos(x))"\n'
        '[model.h1]\ns = "1"\nv = "0"\n'
        '[numerics]\nbasis = "fourier"\nn_x = 64\n'
        '[sweep]\nepsilon = [0.3, 0.2, 0.1, 0.05]\nN = 2\nenergy_window = "Lambda0 + 1.5"\n'
        '[output]\ndirectory = "results"\n'
    )
    assert cfg.model.kind == "warped" and cfg.model.h1 == ("1", "0")
    assert cfg.numerics.basis == "fourier" and cfg.numerics.n_x == 64
    assert cfg.sweep.N == 2 and cfg.sweep.energy_window.resolve(3.0, 9.0) == 4.5
    assert cfg.output.directory == "results"


def test_non_decreasing_epsilon_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config("[sweep]\nepsilon = [0.2, 0.3]\n")
    (issue,) = info.value.issues
    assert issue.line == 2 and "decreasing" in issue.message


def test_malformed_profile_names_position():
    with pytest.raises(ConfigError) as info:
        parse_config('[model]\nprofile = "0.1*cos(x"\n')
    (issue,) = info.value.issues
    assert issue.line == 2 and issue.token == "("
    assert "column 8" in issue.message


def test_all_issues_reported_together():
    with pytest.raises(ConfigError) as info:
        parse_config('[numerics]\nn_q = 3\nn_x = 15\n[sweep]\nwindow = "Lambda2"\n[plots]\nx = 1\n')
    tokens = {i.token for i in info.value.issues}
    assert {"n_q", "15", "Lambda2", "plots"} <= tokens
    assert all(i.line for i in info.value.issues)


def test_basis_must_fit_model():
    with pytest.raises(ConfigError):
        parse_config('[model]\nkind = "warped"\nprofile = "2*pi"\n[numerics]\nbasis = "legendre"\n')


def test_toml_syntax_error_is_located():
    with pytest.raises(ConfigError) as info:
        parse_config("[model\nkind = 1\n")
    assert info.value.issues[0].line == 1


def test_rate_fit_needs_four_epsilons():
    cfg = ExperimentConfig().with_epsilon([0.2, 0.1])
    with pytest.raises(ConfigError):
        run_experiment(cfg, "convergence")
    with pytest.raises(ConfigError):
        ExperimentConfig().with_epsilon([0.1, 0.2, 0.05, 0.01])


def test_load_config_from_file(small_config):
    cfg = load_config(small_config)
    assert cfg.numerics.n_x == 32 and len(cfg.sweep.epsilon) == 4


# rates -------------------------------------------------------------------------


def test_fit_exact_cubic():
    fit = fit_rate([(e, e**3) for e in (0.2, 0.1, 0.05, 0.025)])
    assert abs(fit.slope - 3.0) <= 1e-12 and fit.residual <= 1e-12 and fit.n_points == 4


def test_fit_constant():
    assert abs(fit_rate([(e, 0.7) for e in (0.2, 0.1, 0.05)]).slope) <= 1e-12


def test_fit_floor_guard():
    pts = [(0.2, 8e-3), (0.1, 1e-3), (0.05, 1.25e-4), (0.025, 1e-16)]
    fit = fit_rate(pts)
    assert fit.excluded == ((0.025, 1e-16),)
    assert fit.slope == pytest.approx(3.0)
    with pytest.raises(RateFitError):
        fit_rate([(0.2, 1.0), (0.1, 1e-3), (0.05, 1e-14)], scale=1e3)


def test_fit_needs_three_points():
    with pytest.raises(RateFitError):
        fit_rate([(0.2, 1.0), (0.1, 0.5)])


@given(st.floats(0.5, 5), st.floats(0.1, 10), st.lists(st.floats(0.01, 0.5), min_size=3, max_size=6, unique=True))
def test_fit_recovers_power_law(p, c, eps):
    fit = fit_rate([(e, c * e**p) for e in eps])
    assert fit.slope == pytest.approx(p, abs=1e-9)
    assert fit.intercept == pytest.approx(math.log(c), abs=1e-8)


# report ------------------------------------------------------------------------


def test_checks():
    assert at_least("a", 2.0, 1.8).passed and not at_least("a", 1.7, 1.8).passed
    assert at_most("b", 1e-13, 1e-12).passed
    assert within("c", 3.0, 2.7, 3.5).passed and not within("c", 3.8, 2.7, 3.5).passed
    assert within("c", 3.8, 2.7, 3.5).line().startswith("FAIL c: 3.8 (threshold [2.7, 3.5])")


def test_csv_format():
    text = format_csv(["eps", "err"], [{"eps": 0.1, "err": 1 / 3}], {"n_x": 32, "model_hash": "abc"})
    assert text == "# model_hash: abc\n# n_x: 32\neps,err\n0.10000000000000001,0.33333333333333331\n"


def test_write_report(tmp_path):
    rep = SpectralReport("demo", ["eps", "err"], [{"eps": 0.2, "err": 1.0}], metadata={"k": 1})
    rep.fits["err"] = fit_rate([(0.2, 1.0), (0.1, 0.5), (0.05, 0.25)])
    rep.tables["extra"] = (["i"], [{"i": 1}])
    files = write_report(rep, tmp_path)
    assert [f.name for f in files] == ["demo.csv", "demo_extra.csv", "demo_fits.csv"]
    assert "slope,intercept" in files[2].read_text()


# experiments and CLI --------------------------------------------------------


@pytest.mark.parametrize("kind", ["bands", "effective", "full", "projections"])
def test_small_runs_pass(kind, small_config, tmp_path, capsys):
    assert main([kind, "--config", str(small_config), "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert f"[{kind}]" in out and (tmp_path / f"{kind}.csv").exists()
    assert "# model_hash:" in (tmp_path / f"{kind}.csv").read_text()


def test_outputs_are_deterministic(small_config, tmp_path):
    for kind in ("effective", "projections", "dynamics"):
        for d in ("a", "b"):
            main([kind, "--config", str(small_config), "--out", str(tmp_path / d)])
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "dynamics.csv" in names and "effective_eigenvalues.csv" in names
    for name in names:
        assert body(tmp_path / "a" / name) == body(tmp_path / "b" / name)


def test_bands_report_contents(small_config):
    rep = run_experiment(load_config(small_config), "bands")
    lam0 = np.array(rep.column("lambda0"))
    a = 1.25 + 0.1 * np.cos(np.array(rep.column("x")))
    np.testing.assert_allclose(lam0, np.pi**2 / a**2, rtol=1e-10)
    assert rep.metadata["Lambda1"] > rep.metadata["Lambda0"]


def test_rate_reports_carry_guard(small_config):
    rep = run_experiment(load_config(small_config), "projections")
    assert rep.guard is not None and rep.guard.doubled == (64, 16)
    assert "guard:" in rep.summary()


def test_exit_usage_errors(small_config, tmp_path, capsys):
    assert main(["convergence", "--config", str(small_config), "--eps", "0.2,0.1"]) == EXIT_USAGE
    assert main(["bands", "--config", str(tmp_path / "missing.toml")]) == EXIT_USAGE
    bad = tmp_path / "bad.toml"
    bad.write_text('[model]\nprofile = "0.1*cos(x"\n')
    assert main(["bands", "--config", str(bad)]) == EXIT_USAGE
    assert "line 2" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["plot"])
    assert info.value.code == EXIT_USAGE


def test_exit_numerical_on_guard_failure(tmp_path, capsys):
    cfg = tmp_path / "guard.toml"
    cfg.write_text(SMALL.replace("guard_tol = 1.0", "guard_tol = 1e-30"))
    assert main(["projections", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_NUMERICAL
    assert "run voided" in capsys.readouterr().err


def test_exit_threshold(tmp_path):
    cfg = tmp_path / "strict.toml"
    cfg.write_text(SMALL + "\n[acceptance]\nprojection_slope = 5.0\n")
    assert main(["projections", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_THRESHOLD


def test_window_above_gap_rejected(small_config):
    cfg = load_config(small_config)
    cfg = replace(cfg, sweep=replace(cfg.sweep, window=EnergyCut("Lambda1", 1.0)))
    with pytest.raises(ConfigError):
        run_experiment(cfg, "projections")


def test_verify_enumerates_every_module():
    assert {m for m, _, _ in INVARIANTS} == {"geometry", "fibre", "adiabatic", "superadiabatic", "reference"}
    assert len({n for _, n, _ in INVARIANTS}) == len(INVARIANTS)


def test_verify_flat_strip_passes(tmp_path, capsys):
    cfg = tmp_path / "flat.toml"
    cfg.write_text('[model]\nkind = "strip"\nprofile = "0"\n')
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out
    for module, name, _ in INVARIANTS:
        assert f"{module}.{name}" in out
