"""Config parsing, decay fitting, and the console entry point."""

import re

import numpy as np
import pytest

from rayleighdisk.cli import (ConfigError, Scenario, _sigma_text, fit_decay,
                              load_scenario, main, parse_config)

from conftest import REF_B0


# ---------------------------------------------------------------------------
# parse_config / load_scenario
# ---------------------------------------------------------------------------

def test_parse_config_applies_typed_updates():
    text = """
    # scenario overrides
    solver.dt = 0.1          # trailing comment
    solver.depth_k = 2
    solver.mode = direct

    kernel.beta = 2.0
    """
    sc = parse_config(text)
    assert sc.solver_dt == 0.1
    assert sc.solver_depth_k == 2 and isinstance(sc.solver_depth_k, int)
    assert sc.solver_mode == "direct"
    assert sc.kernel_beta == 2.0
    # untouched keys keep their defaults
    assert sc.field_cG == Scenario().field_cG


def test_parse_config_unknown_key_is_named():
    with pytest.raises(ConfigError, match="bogus.key"):
        parse_config("bogus.key = 1")


def test_parse_config_bad_value_and_missing_equals():
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("solver.dt = fast")
    with pytest.raises(ConfigError, match="expected"):
        parse_config("solver.dt 0.1")


def test_load_scenario_set_overrides_config_file(tmp_path):
    cfg_file = tmp_path / "scenario.cfg"
    cfg_file.write_text("solver.dt = 0.2\nbody.V0 = 0.05\n")

    class Args:
        config = str(cfg_file)
        set = ["solver.dt = 0.1"]

    sc = load_scenario(Args())
    assert sc.solver_dt == 0.1       # --set wins over the file
    assert sc.body_V0 == 0.05        # file wins over the defaults


def test_sigma_text_recognizes_small_fractions():
    assert "10/9" in _sigma_text(10.0 / 9.0)
    assert "24/23" in _sigma_text(24.0 / 23.0)
    # a value that is not within 1e-12 of a small fraction stays plain
    assert "/" not in _sigma_text(1.1111111111)


# ---------------------------------------------------------------------------
# fit_decay
# ---------------------------------------------------------------------------

def test_fit_decay_pure_exponential():
    t = np.arange(0.0, 60.0 + 1e-9, 0.05)
    V = 0.02 * np.exp(-t)
    fit = fit_decay(t, V, V_inf=0.0, b0_rate=1.0, gamma=0.02,
                    sigma=10.0 / 9.0, p=1.0)
    assert fit.b0_hat == pytest.approx(1.0, abs=1e-6)
    # the pure exponential is below the 1e-14 floor well before t = 60,
    # so the late window must be skipped rather than fit on noise
    assert fit.sigma_hat is None
    assert any("late window skipped" in n for n in fit.notices)
    assert np.isfinite(fit.fitted_A)


def test_fit_decay_recovers_power_tail():
    t = np.arange(0.0, 400.0 + 1e-9, 0.2)
    V = 0.02 * np.exp(-t) + 1e-4 * (1.0 + t) ** (-10.0 / 9.0)
    fit = fit_decay(t, V, V_inf=0.0, b0_rate=1.0, gamma=0.02,
                    sigma=10.0 / 9.0, p=1.0)
    # the power term pollutes the early window at the 0.5% level
    assert fit.b0_hat == pytest.approx(1.0, abs=0.05)
    assert fit.sigma_hat == pytest.approx(10.0 / 9.0, abs=0.02)
    assert fit.residuals["late_rvalue"] == pytest.approx(-1.0, abs=1e-4)


def test_fit_decay_clips_overlapping_windows():
    t = np.linspace(0.0, 4.0, 200)
    V = 0.02 * np.exp(-t)
    fit = fit_decay(t, V, V_inf=0.0, b0_rate=1.0, gamma=0.02,
                    sigma=10.0 / 9.0, p=1.0)
    # 5/b0 = 5 exceeds t_end/10 = 0.4: the early window must be clipped
    assert any("clipped" in n for n in fit.notices)
    assert fit.b0_hat == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------------------
# console entry point
# ---------------------------------------------------------------------------

def test_main_validate_accepts_defaults(capsys):
    assert main(["validate"]) == 0
    out = capsys.readouterr().out
    assert "accepted" in out
    assert "p = 1.0" in out
    assert "10/9" in out


def test_main_validate_rejects_shallow_tails(capsys):
    assert main(["validate", "--set", "field.q=1.0"]) == 2
    err = capsys.readouterr().err
    assert "rejected" in err
    assert "q" in err


def test_main_validate_quadratic_kernel_regime(capsys):
    rc = main(["validate",
               "--set", "kernel.family=power-family",
               "--set", "kernel.beta=-1.0",
               "--set", "field.q=2.6",
               "--set", "field.m=1.6"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "p = 2.0" in out
    assert "24/23" in out


def test_main_unknown_key_exits_2(capsys):
    assert main(["validate", "--set", "bogus.key=1"]) == 2
    assert "bogus.key" in capsys.readouterr().err


def test_main_equilibrium_prints_rest_state(capsys):
    assert main(["equilibrium"]) == 0
    out = capsys.readouterr().out
    assert "V_inf = 0.0" in out
    assert f"{REF_B0:.10f}"[:12] in out


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    """A short full solve through the CLI, shared by the output checks."""
    tmp = tmp_path_factory.mktemp("cli_run")
    cfg_file = tmp / "scenario.cfg"
    cfg_file.write_text(
        "solver.t_end = 30.0\n"
        "solver.dt = 0.1\n"
        "solver.depth_k = 2\n"
    )
    out_csv = tmp / "run.csv"
    out_summary = tmp / "summary.txt"
    import io
    from contextlib import redirect_stdout
    buf = io.StringIO()
    with redirect_stdout(buf):
        rc = main(["run", "-c", str(cfg_file),
                   "--out", str(out_csv), "--summary", str(out_summary)])
    return rc, buf.getvalue(), out_csv, out_summary


def test_main_run_exit_and_banner(micro_run):
    rc, stdout, _, _ = micro_run
    assert rc == 0
    assert "converged in" in stdout
    assert "csv ->" in stdout


def test_main_run_csv_schema(micro_run):
    _, _, out_csv, _ = micro_run
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "t,V,X,F00,F0,H,RW,F_total"
    # every data field is written as a full-precision float
    float_re = re.compile(r"-?\d\.\d{16}e[+-]\d{2,3}$")
    for field in lines[1].split(","):
        assert float_re.match(field), field
    data = np.genfromtxt(out_csv, delimiter=",", names=True)
    assert data["t"][0] == 0.0 and data["t"][-1] == 30.0
    assert data["V"][0] == 0.02
    np.testing.assert_allclose(data["F_total"], data["F0"] + data["RW"],
                               rtol=1e-12, atol=1e-18)
    np.testing.assert_allclose(data["F0"], data["F00"] - data["H"],
                               rtol=1e-12, atol=1e-18)


def test_main_run_summary_contents(micro_run):
    _, _, _, out_summary = micro_run
    text = out_summary.read_text()
    assert "# resolved configuration" in text
    assert "solver.dt = 0.1" in text
    assert "# results" in text
    for key in ("V_inf", "b0", "sigma", "iterations", "residual_history",
                "fitted_A", "envelope_pass", "b0_hat", "wall_seconds"):
        assert f"{key} = " in text
    assert "envelope_pass = True" in text


def test_main_decay_fit_reads_run_csv(micro_run, capsys):
    _, _, out_csv, _ = micro_run
    assert main(["decay-fit", str(out_csv)]) == 0
    out = capsys.readouterr().out
    assert "b0_hat = " in out
    assert "sigma_hat = " in out
    assert "fitted_A = " in out
    b0_hat = float(out.split("b0_hat = ")[1].splitlines()[0])
    assert b0_hat == pytest.approx(REF_B0, rel=0.15)


def test_main_mc_csv_schema(tmp_path, capsys):
    out_csv = tmp_path / "mc.csv"
    out_summary = tmp_path / "mc_summary.txt"
    rc = main(["mc", "--set", "mc.n=4000", "--set", "mc.t_end=0.4",
               "--out", str(out_csv), "--summary", str(out_summary)])
    assert rc == 0
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "t,V,X,se"
    data = np.genfromtxt(out_csv, delimiter=",", names=True)
    assert data["V"][0] == 0.02
    assert np.all(data["se"] >= 0.0)
    assert "# results" in out_summary.read_text()


def test_main_compare_reports_gap(capsys):
    rc = main(["compare",
               "--set", "mc.n=20000", "--set", "mc.t_end=5.0",
               "--set", "solver.dt=0.1", "--set", "solver.depth_k=2"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "sup |V_mc - V_det| = " in out
    assert "inside = " in out
    assert "coupling = " in out
    # at this smoke-test particle count the trace is noise-dominated, so the
    # meaningful check is the tool's own statistical verdict
    assert "inside = True" in out
    gap = float(out.split("sup |V_mc - V_det| = ")[1].splitlines()[0])
    assert np.isfinite(gap)
