"""Scenario files, the job runner, and the command-line interface.

A scenario is a JSON document (conventionally ``*.scn``) with a versioned
schema describing the perturbation, grid, solver parameters, and a list of
check jobs.  Every CLI subcommand maps one-to-one onto a library operation;
the CLI only parses arguments and forwards them.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import verify
from .errors import CuspLabError, NotPositiveDefinite, ParseError, ValidationError
from .flow import (
    classical_scatter,
    integrate,
    radial_convergence,
    scatter_jacobian,
    symplectic_defect,
)
from .phasespace import CuspData, bichar_from_cusp
from .quantum import (
    Grid,
    SolverParams,
    coherent_data,
    dump_field,
    export_spectrum_csv,
    packet_moments,
    poisson_free,
    propagate_window,
    scattering_map,
)
from .symbols import MetricBump, PerturbationSpec, PotentialTerm

SCHEMA_VERSION = 1
OUT_ENV_VAR = "CUSPLAB_OUT"


@dataclass(frozen=True)
class Scenario:
    """Validated scenario: perturbation + grid + solver + job list."""

    name: str
    n: int
    spec: PerturbationSpec
    grid: Grid | None
    solver: SolverParams
    flow_tol: float
    seed: int
    jobs: tuple

    def job_named(self, check: str):
        for job in self.jobs:
            if job["check"] == check:
                return job
        return None


def _require(mapping, key, kind, where):
    if key not in mapping:
        raise ParseError(f"missing required entry '{key}'", field=f"{where}.{key}")
    value = mapping[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ParseError(f"entry '{key}' must be a number", field=f"{where}.{key}")
        return float(value)
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ParseError(f"entry '{key}' must be an integer", field=f"{where}.{key}")
        return value
    if not isinstance(value, kind):
        raise ParseError(f"entry '{key}' has the wrong type", field=f"{where}.{key}")
    return value


def _parse_perturbation(doc, n):
    bumps = []
    for i, b in enumerate(doc.get("bumps", [])):
        where = f"perturbation.bumps[{i}]"
        bumps.append(MetricBump(
            amplitude=_require(b, "amplitude", float, where),
            center_z=_require(b, "center_z", list, where),
            center_t=_require(b, "center_t", float, where),
            radius_z=_require(b, "radius_z", float, where),
            radius_t=_require(b, "radius_t", float, where),
            pattern=np.asarray(_require(b, "pattern", list, where), dtype=float),
        ))
    pots = []
    for i, p in enumerate(doc.get("potential_terms", [])):
        where = f"perturbation.potential_terms[{i}]"
        amp = _require(p, "amplitude", list, where)
        if len(amp) != 2:
            raise ParseError("amplitude must be [re, im]", field=f"{where}.amplitude")
        pots.append(PotentialTerm(
            amplitude=complex(amp[0], amp[1]),
            center_z=_require(p, "center_z", list, where),
            center_t=_require(p, "center_t", float, where),
            radius_z=_require(p, "radius_z", float, where),
            radius_t=_require(p, "radius_t", float, where),
        ))
    try:
        return PerturbationSpec(n=n, bumps=tuple(bumps), potential_terms=tuple(pots))
    except NotPositiveDefinite as exc:
        raise ValidationError(str(exc), invariant="NotPositiveDefinite") from exc


def _packet_sigma(h, t):
    return float(np.sqrt((1.0 + 4.0 * h**2 * t**2) / (2.0 * h)))


def _validate_scenario(sc: Scenario):
    if sc.grid is not None and not sc.spec.is_flat:
        if sc.spec.spatial_extent() > 0.8 * sc.grid.L:
            raise ValidationError(
                f"perturbation support (extent {sc.spec.spatial_extent():.3g}) "
                f"exceeds 80% of the spatial box (L = {sc.grid.L})",
                invariant="support-inside-box")
    if sc.grid is None:
        return
    window = sc.spec.time_window()
    edge = 0.0 if window is None else max(abs(window[0]), abs(window[1]))
    horizon = edge + sc.solver.margin
    for job in sc.jobs:
        params = job.get("params", {})
        hs = []
        if "h" in params:
            hs = [params["h"]]
        elif "h_list" in params:
            hs = list(params["h_list"])
        if not hs or "Z0" not in params:
            continue
        Z0 = np.max(np.abs(np.atleast_1d(params["Z0"])))
        fraks = [params.get(key) for key in ("frak0", "frak_far", "frak_through")]
        for frak in fraks:
            if frak is None:
                continue
            off = np.max(np.abs(np.atleast_1d(frak)))
            for h in hs:
                extent = 2.0 * horizon * Z0 + off + 6.0 * _packet_sigma(h, horizon)
                if extent > 0.95 * sc.grid.L:
                    raise ValidationError(
                        f"job '{job['check']}' needs extent {extent:.3g} "
                        f"> 95% of the box (L = {sc.grid.L})",
                        invariant="grid-accommodates-jobs")


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read scenario file: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: "
                         f"{exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError("scenario must be a JSON object")
    version = _require(doc, "schema_version", int, "scenario")
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {version}",
                         field="scenario.schema_version")
    name = _require(doc, "name", str, "scenario")
    n = _require(doc, "dimension", int, "scenario")
    spec = _parse_perturbation(doc.get("perturbation", {}), n)

    grid = None
    if doc.get("grid") is not None:
        gdoc = doc["grid"]
        grid = Grid(n=n, N=_require(gdoc, "points", int, "grid"),
                    L=_require(gdoc, "half_width", float, "grid"))

    sdoc = doc.get("solver", {})
    solver = SolverParams(
        dt=float(sdoc.get("dt", 1e-3)),
        margin=float(sdoc.get("margin", 0.25)),
        measure_compensated=bool(sdoc.get("measure_compensated", True)),
    )
    flow_tol = float(sdoc.get("flow_tol", 1e-11))
    seed = int(doc.get("seed", 0))

    jobs = []
    for i, job in enumerate(doc.get("jobs", [])):
        where = f"jobs[{i}]"
        check = _require(job, "check", str, where)
        if check not in JOB_DISPATCH:
            raise ParseError(f"unknown check '{check}'", field=f"{where}.check")
        jobs.append({"check": check,
                     "params": dict(job.get("params", {})),
                     "control": bool(job.get("control", False))})

    sc = Scenario(name=name, n=n, spec=spec, grid=grid, solver=solver,
                  flow_tol=flow_tol, seed=seed, jobs=tuple(jobs))
    _validate_scenario(sc)
    return sc


def bundled_scenario_path(name: str) -> str:
    """Path of a scenario shipped with the package (e.g. 'flat')."""
    from importlib.resources import files

    fname = name if name.endswith(".scn") else f"{name}.scn"
    return str(files("cusplab").joinpath("scenarios", fname))


def resolve_scenario(ref: str) -> Scenario:
    """Load from a filesystem path, falling back to the bundled set."""
    if os.path.exists(ref):
        return load_scenario(ref)
    bundled = bundled_scenario_path(ref)
    if os.path.exists(bundled):
        return load_scenario(bundled)
    raise ParseError(f"no scenario file or bundled scenario named '{ref}'")


# ---------------------------------------------------------------------------
# job dispatch


def _needs_grid(sc):
    if sc.grid is None:
        raise ValidationError("this job requires a grid section",
                              invariant="job-requires-grid")
    return sc.grid


def _job_free_identity(sc, params, tol_scale, out_dir):
    return verify.check_free_identity(
        _needs_grid(sc), sc.solver,
        tol=params.get("tol", 1e-6) * tol_scale,
        span=params.get("span", 1.0),
        mutate_sign=params.get("mutate_sign", False),
        out_dir=out_dir)


def _job_unitarity(sc, params, tol_scale, out_dir):
    return verify.check_unitarity(
        sc.spec, _needs_grid(sc), sc.solver,
        tol=params.get("tol", 1e-6) * tol_scale,
        control=params.get("control", False),
        out_dir=out_dir)


def _job_pairing(sc, params, tol_scale, out_dir):
    return verify.check_pairing(
        sc.spec, _needs_grid(sc), sc.solver,
        tol=params.get("tol", 5e-4) * tol_scale,
        refine=params.get("refine", False),
        refine_factor=params.get("refine_factor", 3.0),
        out_dir=out_dir)


def _job_symplectic(sc, params, tol_scale, out_dir):
    return verify.check_symplectic(
        sc.spec,
        samples=params.get("samples", 20),
        h_fd=params.get("h_fd", 1e-4),
        tol_flow=sc.flow_tol,
        tol=params.get("tol", 1e-6) * tol_scale,
        seed=params.get("seed", sc.seed),
        beam_scale=params.get("beam_scale", 1.0),
        out_dir=out_dir)


def _job_radial(sc, params, tol_scale, out_dir):
    c_in = CuspData(Z=params.get("Z0", [1.0] * sc.n),
                    frak=params.get("frak0", [0.3] * sc.n))
    return verify.check_radial(
        sc.spec, c_in,
        horizon=params.get("horizon", 1e6),
        tol_flow=sc.flow_tol,
        exponent_tol=params.get("exponent_tol", 0.01) * tol_scale,
        limit_tol=params.get("limit_tol", 1e-8) * tol_scale,
        out_dir=out_dir)


def _job_egorov(sc, params, tol_scale, out_dir):
    return verify.check_egorov(
        sc.spec, _needs_grid(sc),
        params.get("Z0", [1.5] * sc.n), params.get("frak0", [0.0] * sc.n),
        params.get("h_list", [0.1, 0.03, 0.01]),
        sc.solver,
        rel_cap=params.get("rel_cap", 0.05) * tol_scale,
        tol_flow=min(sc.flow_tol, 1e-12),
        out_dir=out_dir)


def _job_eikonal(sc, params, tol_scale, out_dir):
    return verify.check_eikonal_phase(
        sc.spec, _needs_grid(sc),
        params.get("Z0", [1.0] * sc.n), params.get("frak0", [0.0] * sc.n),
        h=params.get("h", 0.25),
        params=sc.solver,
        rel_tol=params.get("rel_tol", 0.05) * tol_scale,
        abs_tol=params.get("abs_tol", 0.01) * tol_scale,
        linearity_tol=params.get("linearity_tol", 0.1) * tol_scale,
        out_dir=out_dir)


def _job_highfreq(sc, params, tol_scale, out_dir):
    return verify.check_highfreq_identity(
        sc.spec, _needs_grid(sc),
        params.get("Z0", [1.0] * sc.n),
        params["frak_far"],
        frak_through=params.get("frak_through"),
        h=params.get("h", 0.5),
        params=sc.solver,
        tol=params.get("tol", 1e-3) * tol_scale,
        control_floor=params.get("control_floor", 1e-1),
        out_dir=out_dir)


def _job_noncompact(sc, params, tol_scale, out_dir):
    return verify.check_noncompactness(
        sc.spec, _needs_grid(sc),
        params.get("Z0", [1.5] * sc.n), params.get("frak0", [0.0] * sc.n),
        h_list=params.get("h_list", [0.1, 0.05, 0.02, 0.01]),
        params=sc.solver,
        c_floor=params.get("c_floor"),
        control=params.get("control", False),
        out_dir=out_dir)


JOB_DISPATCH = {
    "free-identity": _job_free_identity,
    "unitarity": _job_unitarity,
    "pairing": _job_pairing,
    "symplectic": _job_symplectic,
    "radial": _job_radial,
    "egorov": _job_egorov,
    "eikonal": _job_eikonal,
    "highfreq": _job_highfreq,
    "noncompact": _job_noncompact,
}


def _job_out_dir(out_root, scenario_name, check, index):
    return os.path.join(out_root, scenario_name, f"{index:02d}_{check}")


def run_job(sc: Scenario, job: dict, out_root: str, index: int,
            tol_scale: float = 1.0):
    """Execute one job; errors are captured in the report."""
    out_dir = _job_out_dir(out_root, sc.name, job["check"], index)
    os.makedirs(out_dir, exist_ok=True)
    try:
        report = JOB_DISPATCH[job["check"]](sc, job.get("params", {}),
                                            tol_scale, out_dir)
    except CuspLabError as exc:
        report = verify.CheckReport(
            name=job["check"],
            measured=[verify.Measurement("error-free-execution", float("inf"), 0.0)],
            note=f"{type(exc).__name__}: {exc}")
    report.control = report.control or job.get("control", False)
    report.write(out_dir)
    return report


def run(sc: Scenario, only=None, out_root: str = "out", tol_scale: float = 1.0,
        jobs: int = 1):
    """Run the scenario's jobs; returns (exit_code, reports).

    Exit code 0 iff every non-control check passes."""
    selected = [(i, job) for i, job in enumerate(sc.jobs)
                if only is None or job["check"] in only]
    if jobs > 1 and len(selected) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_job, sc, job, out_root, i, tol_scale)
                       for i, job in selected]
            reports = [f.result() for f in futures]
    else:
        reports = [run_job(sc, job, out_root, i, tol_scale) for i, job in selected]
    exit_code = 0 if all(r.status == "pass" for r in reports if not r.control) else 1
    return exit_code, reports


# ---------------------------------------------------------------------------
# CLI


def _parse_vector(text):
    return [float(v) for v in text.split(",")]


def _print_report(report):
    print(f"[{report.status.upper():4s}] {report.name}"
          + ("  (control: expected to fail)" if report.control else ""))
    for m in report.measured:
        print(f"    {m.label}: {m.value:.6g} (tolerance {m.tolerance:.6g}) "
              f"{'ok' if m.ok else 'VIOLATED'}")
    if report.note:
        print(f"    note: {report.note}")


def _out_root(args):
    return args.out or os.environ.get(OUT_ENV_VAR, "out")


def _cmd_check(args, names):
    sc = resolve_scenario(args.scenario)
    only = set(names if isinstance(names, (list, tuple)) else [names])
    if args.only:
        only &= set(args.only.split(","))
    code, reports = run(sc, only=only, out_root=_out_root(args),
                        tol_scale=args.tol_scale, jobs=args.jobs)
    for r in reports:
        _print_report(r)
    if not reports:
        print(f"scenario '{sc.name}' declares no matching jobs")
        return 1
    return code


def _cmd_all(args):
    sc = resolve_scenario(args.scenario)
    only = set(args.only.split(",")) if args.only else None
    code, reports = run(sc, only=only, out_root=_out_root(args),
                        tol_scale=args.tol_scale, jobs=args.jobs)
    for r in reports:
        _print_report(r)
    return code


def _cmd_report(args):
    root = os.path.join(_out_root(args), args.scenario_name)
    if not os.path.isdir(root):
        print(f"no outputs under {root}")
        return 1
    rows = []
    for sub in sorted(os.listdir(root)):
        path = os.path.join(root, sub, "report.json")
        if os.path.exists(path):
            with open(path) as fh:
                doc = json.load(fh)
            rows.append((sub, doc["status"], doc["control"], doc["satisfied"]))
    for sub, status, control, satisfied in rows:
        tag = "control" if control else "check"
        print(f"{sub:30s} {status:4s} [{tag}] satisfied={satisfied}")
    return 0 if all(sat for _, _, _, sat in rows) else 1


def _cmd_flow(args):
    sc = resolve_scenario(args.scenario)
    c_in = CuspData(Z=_parse_vector(args.Z), frak=_parse_vector(args.frak))
    p0 = bichar_from_cusp(c_in, args.t0)
    traj = integrate(sc.spec, p0, args.t1, tol=sc.flow_tol)
    out = os.path.join(_out_root(args), sc.name, "flow")
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "trajectory.csv")
    traj.export_csv(path, stride=args.stride)
    print(f"trajectory written to {path}")
    print("stats:", traj.stats)
    return 0


def _cmd_classical_map(args):
    sc = resolve_scenario(args.scenario)
    c_in = CuspData(Z=_parse_vector(args.Z), frak=_parse_vector(args.frak))
    res = classical_scatter(sc.spec, c_in, tol=sc.flow_tol)
    print("Z_out    =", res.c_out.Z)
    print("frak_out =", res.c_out.frak)
    print("potential_phase =", res.potential_phase,
          "(imag part:", res.potential_phase_imag, ")")
    print("action_diff =", res.action_diff)
    print("transit =", res.transit)
    return 0


def _cmd_jacobian(args):
    sc = resolve_scenario(args.scenario)
    c_in = CuspData(Z=_parse_vector(args.Z), frak=_parse_vector(args.frak))
    jac = scatter_jacobian(sc.spec, c_in, h_fd=args.h_fd, tol=sc.flow_tol)
    np.set_printoptions(precision=10, suppress=False)
    print(jac)
    print("symplectic defect:", symplectic_defect(jac))
    return 0


def _cmd_radial_op(args):
    sc = resolve_scenario(args.scenario)
    c_in = CuspData(Z=_parse_vector(args.Z), frak=_parse_vector(args.frak))
    window = sc.spec.time_window() or (-1.0, 1.0)
    p0 = bichar_from_cusp(c_in, window[0] - 2.0)
    rep = radial_convergence(sc.spec, p0, horizon=args.horizon, tol=sc.flow_tol)
    print("exponent forward :", rep.exponent_forward)
    print("exponent backward:", rep.exponent_backward)
    print("limit forward    :", rep.limit_forward.Z, rep.limit_forward.frak)
    print("limit backward   :", rep.limit_backward.Z, rep.limit_backward.frak)
    return 0


def _cmd_propagate(args):
    sc = resolve_scenario(args.scenario)
    grid = sc.grid
    if grid is None:
        raise ValidationError("scenario has no grid", invariant="job-requires-grid")
    f = coherent_data(grid, _parse_vector(args.Z), _parse_vector(args.frak), args.h)
    window = sc.spec.time_window()
    edge = 0.0 if window is None else max(abs(window[0]), abs(window[1]))
    span = edge + sc.solver.margin
    u = poisson_free(f, -span)
    u = propagate_window(sc.spec, u, -span, span, sc.solver.dt, sc.solver)
    out = os.path.join(_out_root(args), sc.name, "propagate")
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "field.field")
    dump_field(path, u)
    print(f"field at t={u.time} written to {path}; norm = {u.norm():.12g}, "
          f"shell fraction = {u.boundary_leak_fraction():.3e}")
    return 0


def _cmd_scatter(args):
    sc = resolve_scenario(args.scenario)
    grid = sc.grid
    if grid is None:
        raise ValidationError("scenario has no grid", invariant="job-requires-grid")
    f = coherent_data(grid, _parse_vector(args.Z), _parse_vector(args.frak), args.h)
    fp = scattering_map(sc.spec, f, sc.solver)
    out = os.path.join(_out_root(args), sc.name, "scatter")
    os.makedirs(out, exist_ok=True)
    export_spectrum_csv(os.path.join(out, "incoming.csv"), f)
    export_spectrum_csv(os.path.join(out, "outgoing.csv"), fp)
    dump_field(os.path.join(out, "outgoing.field"), fp)
    zb, fb = packet_moments(fp)
    print(f"outgoing data written under {out}")
    print("moments:", zb, fb, " norm:", fp.norm())
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="cusplab",
        description="Scattering-map laboratory for compactly perturbed "
                    "time-dependent Schrodinger operators")
    parser.add_argument("--out", default=None,
                        help=f"output directory (default 'out' or ${OUT_ENV_VAR})")
    parser.add_argument("--jobs", type=int, default=1, help="parallel job count")
    parser.add_argument("--only", default=None,
                        help="comma-separated job filter")
    parser.add_argument("--tol-scale", type=float, default=1.0, dest="tol_scale",
                        help="global tolerance multiplier (acceptance requires 1.0)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_scenario(p):
        p.add_argument("--scenario", required=True,
                       help="scenario file path or bundled name")

    def add_beam(p, with_h=False):
        p.add_argument("--Z", required=True, help="comma-separated Z components")
        p.add_argument("--frak", required=True, help="comma-separated frak components")
        if with_h:
            p.add_argument("--h", type=float, default=0.25, help="packet width")

    p = sub.add_parser("flow", help="integrate one bicharacteristic, export CSV")
    add_scenario(p)
    add_beam(p)
    p.add_argument("--t0", type=float, required=True)
    p.add_argument("--t1", type=float, required=True)
    p.add_argument("--stride", type=float, default=0.01)

    p = sub.add_parser("classical-map", help="classical scattering of one beam")
    add_scenario(p)
    add_beam(p)

    p = sub.add_parser("jacobian", help="scattering-map Jacobian and symplectic defect")
    add_scenario(p)
    add_beam(p)
    p.add_argument("--h-fd", type=float, default=1e-4, dest="h_fd")

    p = sub.add_parser("radial", help="radial-set convergence of one beam")
    add_scenario(p)
    add_beam(p)
    p.add_argument("--horizon", type=float, default=1e6)

    p = sub.add_parser("propagate", help="propagate a packet across the window")
    add_scenario(p)
    add_beam(p, with_h=True)

    p = sub.add_parser("scatter", help="apply the scattering map to a packet")
    add_scenario(p)
    add_beam(p, with_h=True)

    for name in ("egorov", "pairing", "unitarity", "eikonal", "highfreq",
                 "noncompact", "symplectic"):
        p = sub.add_parser(name, help=f"run the scenario's '{name}' jobs")
        add_scenario(p)

    p = sub.add_parser("all", help="run every job declared by the scenario")
    add_scenario(p)

    p = sub.add_parser("report", help="summarize reports under the output directory")
    p.add_argument("scenario_name")

    args = parser.parse_args(argv)
    try:
        if args.command == "flow":
            return _cmd_flow(args)
        if args.command == "classical-map":
            return _cmd_classical_map(args)
        if args.command == "jacobian":
            return _cmd_jacobian(args)
        if args.command == "radial":
            return _cmd_radial_op(args)
        if args.command == "propagate":
            return _cmd_propagate(args)
        if args.command == "scatter":
            return _cmd_scatter(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "all":
            return _cmd_all(args)
        return _cmd_check(args, {
            "egorov": "egorov", "pairing": "pairing", "unitarity": "unitarity",
            "eikonal": "eikonal", "highfreq": "highfreq",
            "noncompact": "noncompact", "symplectic": "symplectic",
        }[args.command])
    except CuspLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
