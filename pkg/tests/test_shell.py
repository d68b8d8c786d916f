"""Scenario parsing/validation, the runner, and the CLI surface."""

import json
import os

import numpy as np
import pytest

from cusplab.errors import ParseError, ValidationError
from cusplab.shell import (
    Scenario,
    bundled_scenario_path,
    load_scenario,
    main,
    resolve_scenario,
    run,
)


def _write(tmp_path, doc, name="case.scn"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def _minimal(**overrides):
    doc = {
        "schema_version": 1,
        "name": "case",
        "dimension": 1,
        "perturbation": {},
        "grid": {"points": 256, "half_width": 20.0},
        "solver": {"dt": 2e-3},
        "jobs": [],
    }
    doc.update(overrides)
    return doc


def test_bundled_flat_scenario_loads():
    sc = load_scenario(bundled_scenario_path("flat"))
    assert sc.name == "flat"
    assert sc.spec.is_flat
    assert len(sc.spec.bumps) == 0
    assert sc.grid.N == 1024 and sc.grid.L == 60.0


def test_bundled_bump_metric_scenario_metric_value():
    sc = load_scenario(bundled_scenario_path("bump_metric"))
    g = sc.spec.inverse_metric([0.0], 0.0)
    assert abs(g[0, 0] - 1.05) < 1e-14


def test_all_bundled_scenarios_parse():
    for name in ("flat", "potential", "bump_metric", "classical2d",
                 "egorov", "highfreq", "eikonal"):
        sc = resolve_scenario(name)
        assert isinstance(sc, Scenario)


def test_scenario_not_positive_definite(tmp_path):
    doc = _minimal(perturbation={
        "bumps": [{"amplitude": -1.5, "center_z": [0.0], "center_t": 0.0,
                   "radius_z": 1.0, "radius_t": 1.0, "pattern": [[1.0]]}]})
    with pytest.raises(ValidationError) as err:
        load_scenario(_write(tmp_path, doc))
    assert err.value.invariant == "NotPositiveDefinite"


def test_scenario_malformed_json_reports_line(tmp_path):
    path = tmp_path / "bad.scn"
    path.write_text('{"schema_version": 1,\n  "name": oops}')
    with pytest.raises(ParseError) as err:
        load_scenario(str(path))
    assert "line 2" in str(err.value)


def test_scenario_missing_field(tmp_path):
    doc = _minimal()
    del doc["name"]
    with pytest.raises(ParseError) as err:
        load_scenario(_write(tmp_path, doc))
    assert err.value.field == "scenario.name"


def test_scenario_unknown_check(tmp_path):
    doc = _minimal(jobs=[{"check": "does-not-exist"}])
    with pytest.raises(ParseError):
        load_scenario(_write(tmp_path, doc))


def test_scenario_wrong_schema_version(tmp_path):
    doc = _minimal(schema_version=99)
    with pytest.raises(ParseError):
        load_scenario(_write(tmp_path, doc))


def test_scenario_support_must_fit_in_box(tmp_path):
    doc = _minimal(perturbation={
        "bumps": [{"amplitude": 0.05, "center_z": [15.0], "center_t": 0.0,
                   "radius_z": 4.0, "radius_t": 1.0, "pattern": [[1.0]]}]})
    with pytest.raises(ValidationError) as err:
        load_scenario(_write(tmp_path, doc))
    assert err.value.invariant == "support-inside-box"


def test_scenario_grid_must_accommodate_packets(tmp_path):
    doc = _minimal(jobs=[{
        "check": "highfreq",
        "params": {"Z0": [1.0], "frak_far": [30.0], "h": 0.5}}])
    with pytest.raises(ValidationError) as err:
        load_scenario(_write(tmp_path, doc))
    assert err.value.invariant == "grid-accommodates-jobs"


def test_run_flat_scenario_exit_zero(tmp_path):
    sc = load_scenario(bundled_scenario_path("flat"))
    code, reports = run(sc, only={"pairing"}, out_root=str(tmp_path))
    assert code == 0
    assert len(reports) == 1 and reports[0].status == "pass"
    out = tmp_path / "flat" / "02_pairing" / "report.json"
    assert out.exists()


def test_run_captures_boundary_leak_and_fails(tmp_path):
    # deliberately cramped box: the pairing check's packets reach the
    # outer-shell monitor during the window
    doc = _minimal(
        grid={"points": 256, "half_width": 8.0},
        perturbation={"potential_terms": [
            {"amplitude": [0.3, 0.0], "center_z": [0.0], "center_t": 0.0,
             "radius_z": 2.0, "radius_t": 1.0}]},
        jobs=[{"check": "pairing"}])
    sc = load_scenario(_write(tmp_path, doc))
    code, reports = run(sc, out_root=str(tmp_path))
    assert code == 1
    assert reports[0].status == "fail"
    assert "BoundaryLeak" in reports[0].note


def test_run_captures_precondition_errors(tmp_path):
    # run-time precondition violation (beam offset too small) is captured
    doc = _minimal(
        grid={"points": 512, "half_width": 20.0},
        perturbation={"bumps": [
            {"amplitude": 0.05, "center_z": [0.0], "center_t": 0.0,
             "radius_z": 1.0, "radius_t": 1.0, "pattern": [[1.0]]}]},
        jobs=[{"check": "highfreq",
               "params": {"Z0": [1.0], "frak_far": [4.0], "h": 0.5}}])
    sc = load_scenario(_write(tmp_path, doc))
    code, reports = run(sc, out_root=str(tmp_path))
    assert code == 1
    assert "ValidationError" in reports[0].note


def test_run_is_deterministic(tmp_path):
    sc = load_scenario(bundled_scenario_path("flat"))
    run(sc, only={"pairing"}, out_root=str(tmp_path / "a"))
    run(sc, only={"pairing"}, out_root=str(tmp_path / "b"))
    rep_a = (tmp_path / "a" / "flat" / "02_pairing" / "pairing_residuals.csv").read_bytes()
    rep_b = (tmp_path / "b" / "flat" / "02_pairing" / "pairing_residuals.csv").read_bytes()
    assert rep_a == rep_b


def test_classical_only_scenario_needs_no_grid():
    sc = resolve_scenario("classical2d")
    assert sc.grid is None
    # the symplectic job runs without any quantum solver being constructed
    code, reports = run(sc, only={"symplectic"}, out_root="/tmp/cusplab_test_cls",
                        tol_scale=1.0)
    assert code == 0 and reports[0].status == "pass"


def test_parallel_job_execution(tmp_path):
    sc = resolve_scenario("flat")
    code, reports = run(sc, only={"pairing", "free-identity"},
                        out_root=str(tmp_path), jobs=2)
    assert code == 0
    assert {r.name for r in reports} == {"pairing", "free-identity"}


def test_cli_classical_map(capsys):
    code = main(["classical-map", "--scenario", "bump_metric",
                 "--Z", "1.0", "--frak", "0.3"])
    out = capsys.readouterr().out
    assert code == 0
    assert "Z_out" in out and "action_diff" in out


def test_cli_flow_writes_trajectory(tmp_path, capsys):
    code = main(["--out", str(tmp_path), "flow", "--scenario", "bump_metric",
                 "--Z", "1.0", "--frak", "0.3", "--t0", "-2.5", "--t1", "2.5",
                 "--stride", "0.5"])
    assert code == 0
    csv = tmp_path / "bump_metric" / "flow" / "trajectory.csv"
    lines = csv.read_text().strip().splitlines()
    assert lines[0] == "t,z_1,zeta_1,tau,p_residual"
    assert len(lines) > 5


def test_cli_jacobian(capsys):
    code = main(["jacobian", "--scenario", "classical2d",
                 "--Z", "1.0,0.0", "--frak", "0.0,0.3"])
    out = capsys.readouterr().out
    assert code == 0
    assert "symplectic defect" in out


def test_cli_scatter_and_report(tmp_path, capsys):
    code = main(["--out", str(tmp_path), "scatter", "--scenario", "eikonal",
                 "--Z", "1.0", "--frak", "0.0", "--h", "0.25"])
    assert code == 0
    assert (tmp_path / "eikonal" / "scatter" / "outgoing.csv").exists()
    assert (tmp_path / "eikonal" / "scatter" / "outgoing.field").exists()


def test_cli_check_subcommand(tmp_path, capsys):
    code = main(["--out", str(tmp_path), "eikonal", "--scenario", "eikonal"])
    out = capsys.readouterr().out
    assert code == 0
    assert "PASS" in out
    code = main(["--out", str(tmp_path), "report", "eikonal"])
    out = capsys.readouterr().out
    assert code == 0
    assert "eikonal" in out


def test_cli_bad_scenario_returns_error(capsys):
    code = main(["classical-map", "--scenario", "nope-does-not-exist",
                 "--Z", "1.0", "--frak", "0.0"])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_out_env_var_override(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CUSPLAB_OUT", str(tmp_path))
    code = main(["eikonal", "--scenario", "eikonal"])
    assert code == 0
    assert (tmp_path / "eikonal").exists()
