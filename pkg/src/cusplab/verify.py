"""Property checks wiring the classical flow against the quantum map.

Every check produces a :class:`CheckReport` whose status is a pure function
of its measurements: each measurement passes iff ``value <= tolerance``.
Quantities that must *exceed* a threshold are encoded as
``threshold - observed`` so the same rule applies.  Checks are deterministic
given their inputs and seeds, and emit plot-ready CSV artifacts when given
an output directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import quad

from . import flow as _flow
from . import quantum as _q
from .errors import ValidationError
from .phasespace import CuspData, bichar_from_cusp
from .symbols import PerturbationSpec, flat_spec


@dataclass(frozen=True)
class Measurement:
    label: str
    value: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value <= self.tolerance


@dataclass
class CheckReport:
    name: str
    measured: list
    artifacts: list = field(default_factory=list)
    control: bool = False   # negative control: the runner expects status "fail"
    note: str = ""

    @property
    def status(self) -> str:
        return "pass" if all(m.ok for m in self.measured) else "fail"

    @property
    def satisfied(self) -> bool:
        """Did the check behave as required (controls must fail)?"""
        return (self.status == "fail") if self.control else (self.status == "pass")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "control": self.control,
            "satisfied": self.satisfied,
            "note": self.note,
            "measured": [
                {"label": m.label, "value": m.value, "tolerance": m.tolerance,
                 "ok": m.ok}
                for m in self.measured
            ],
            "artifacts": self.artifacts,
        }

    def write(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _write_csv(out_dir, name, header, rows):
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    return path


def _default_inputs(grid):
    """Five fixed band-limited packets (centre, frequency, width)."""
    cfg = [(0.0, 0.0, 0.5), (1.0, 0.3, 0.2), (-0.8, 3.0, 0.3),
           (0.5, -2.0, 0.15), (-1.2, 1.0, 0.4)]
    return [_q.coherent_data(grid, [z] * grid.n, [fr] * grid.n, h) for z, fr, h in cfg]


# ---------------------------------------------------------------------------


def check_free_identity(grid: _q.Grid, params: _q.SolverParams | None = None,
                        tol: float = 1e-6, span: float = 1.0,
                        mutate_sign: bool = False, out_dir=None) -> CheckReport:
    """The flat operator's map must return its input.

    Runs the full pipeline (data -> field before the window -> propagate ->
    data) over [-span, span].  ``mutate_sign`` flips the extraction
    multiplier (negative control: must fail)."""
    params = params or _q.SolverParams()
    spec = flat_spec(grid.n)
    measured = []
    rows = []
    for k, f in enumerate(_default_inputs(grid)):
        u = _q.poisson_free(f, -span)
        u = _q.propagate_window(spec, u, -span, span, params.dt, params)
        if mutate_sign:
            bad = np.exp(-1j * u.time * grid.dual_norm_sq()) * _q.forward_ft(grid, u.values)
            f_out = _q.SpectralData(grid=grid, values=bad)
        else:
            f_out = _q.extract_asymptotic(u, spec)
        err = np.linalg.norm(f_out.values - f.values) / np.linalg.norm(f.values)
        measured.append(Measurement(f"identity-defect-{k}", float(err), tol))
        rows.append((k, err))
    art = _write_csv(out_dir, "identity_defects.csv", ["input", "rel_error"], rows)
    rep = CheckReport(name="free-identity", measured=measured, control=mutate_sign)
    if art:
        rep.artifacts.append(art)
    return rep


def check_unitarity(spec: PerturbationSpec, grid: _q.Grid,
                    params: _q.SolverParams | None = None,
                    tol: float = 1e-6, control: bool = False,
                    out_dir=None) -> CheckReport:
    """Norm preservation of the map for flat metric and real potential.

    With ``control`` the potential is made dissipative (Im V < 0), losing
    mass; the resulting report must fail."""
    params = params or _q.SolverParams()
    if control:
        spec = PerturbationSpec(
            n=spec.n, bumps=spec.bumps,
            potential_terms=tuple(
                replace(p, amplitude=p.amplitude.real - 0.3j * abs(p.amplitude))
                for p in spec.potential_terms))
    else:
        if not spec.metric_is_flat:
            raise ValidationError("unitarity check requires a flat metric",
                                  invariant="unitarity-flat-metric")
        if any(abs(p.amplitude.imag) > 0 for p in spec.potential_terms):
            raise ValidationError("unitarity check requires a real potential",
                                  invariant="unitarity-real-potential")
    measured = []
    rows = []
    for k, f in enumerate(_default_inputs(grid)):
        fp = _q.scattering_map(spec, f, params)
        defect = abs(fp.norm() - f.norm()) / f.norm()
        measured.append(Measurement(f"norm-defect-{k}", float(defect), tol))
        rows.append((k, defect))
    art = _write_csv(out_dir, "norm_defects.csv", ["input", "rel_defect"], rows)
    rep = CheckReport(name="unitarity", measured=measured, control=control)
    if art:
        rep.artifacts.append(art)
    return rep


def check_pairing(spec: PerturbationSpec, grid: _q.Grid,
                  params: _q.SolverParams | None = None,
                  tol: float = 5e-4, refine: bool = False,
                  refine_factor: float = 3.0, control: bool = False,
                  out_dir=None) -> CheckReport:
    """<f_+, g_+> = <f_-, g_-> for the map and its adjoint.

    With ``refine`` the run is repeated at (dt/2, 2N) and the residual must
    shrink by at least ``refine_factor``.  The ``control`` variant replaces
    the adjoint route by the plain map (a broken adjoint) and must fail."""
    params = params or _q.SolverParams()

    def residual(g_, p_):
        f = _q.coherent_data(g_, [1.0] * g_.n, [0.3] * g_.n, 0.2)
        g = _q.coherent_data(g_, [0.7] * g_.n, [-0.5] * g_.n, 0.3)
        fp = _q.scattering_map(spec, f, p_)
        if control:
            gm = _q.scattering_map(spec, g, p_)
        else:
            gm = _q.adjoint_scattering_map(spec, g, p_)
        return abs(fp.inner(g) - f.inner(gm)) / (f.norm() * g.norm())

    r0 = residual(grid, params)
    measured = [Measurement("pairing-residual", float(r0), tol)]
    rows = [(grid.N, params.dt, r0)]
    if refine:
        fine_grid = _q.Grid(n=grid.n, N=2 * grid.N, L=grid.L)
        fine = replace(params, dt=0.5 * params.dt)
        r1 = residual(fine_grid, fine)
        rows.append((fine_grid.N, fine.dt, r1))
        # refinement must shrink the residual by >= refine_factor
        measured.append(Measurement("refinement-shrink",
                                    float(refine_factor - r0 / max(r1, 1e-300)), 0.0))
    art = _write_csv(out_dir, "pairing_residuals.csv", ["N", "dt", "residual"], rows)
    rep = CheckReport(name="pairing", measured=measured, control=control)
    if art:
        rep.artifacts.append(art)
    return rep


def check_symplectic(spec: PerturbationSpec, samples: int = 20,
                     h_fd: float = 1e-4, tol_flow: float = 1e-11,
                     tol: float = 1e-6, seed: int = 2, beam_scale: float = 1.0,
                     mutate: bool = False, out_dir=None) -> CheckReport:
    """J^T Omega J = Omega for the scattering-map Jacobian over random beams.

    ``mutate`` scales one Jacobian row (a non-symplectic matrix), verifying
    the defect metric is discriminating; that control must fail."""
    rng = np.random.default_rng(seed)
    rows = []
    worst = 0.0
    for k in range(samples):
        Z = rng.uniform(0.5, 2.0, spec.n) * rng.choice([-1.0, 1.0], spec.n)
        frak = rng.uniform(-beam_scale, beam_scale, spec.n)
        jac = _flow.scatter_jacobian(spec, CuspData(Z=Z, frak=frak),
                                     h_fd=h_fd, tol=tol_flow)
        if mutate:
            jac = jac.copy()
            jac[0, :] *= 1.05
        defect = _flow.symplectic_defect(jac)
        worst = max(worst, defect)
        rows.append((k, defect))
    art = _write_csv(out_dir, "symplectic_defects.csv", ["beam", "defect"], rows)
    rep = CheckReport(name="symplectic", control=mutate,
                      measured=[Measurement("max-symplectic-defect", worst, tol)])
    if art:
        rep.artifacts.append(art)
    return rep


def check_radial(spec: PerturbationSpec, c_in: CuspData, horizon: float = 1e6,
                 tol_flow: float = 1e-11, exponent_tol: float = 0.01,
                 limit_tol: float = 1e-8, mutate: bool = False,
                 out_dir=None) -> CheckReport:
    """Radial-set convergence: |z/(2t) - zeta| decays like 1/|t| and its
    limits reproduce the scattering map computed independently.

    ``mutate`` offsets the scattering target (broken cross-check; must fail)."""
    seed_t = (spec.time_window() or (-1.0, 1.0))[0] - 2.0
    p0 = bichar_from_cusp(c_in, seed_t)
    report = _flow.radial_convergence(spec, p0, horizon=horizon, tol=tol_flow)
    scatter = _flow.classical_scatter(spec, c_in, tol=tol_flow)
    target = scatter.c_out.pair() + (0.1 if mutate else 0.0)
    fwd_err = float(np.max(np.abs(report.limit_forward.pair() - target)))
    bwd_err = float(np.max(np.abs(report.limit_backward.pair() - c_in.pair())))
    measured = [
        Measurement("exponent-forward", abs(report.exponent_forward - 1.0), exponent_tol),
        Measurement("exponent-backward", abs(report.exponent_backward - 1.0), exponent_tol),
        Measurement("forward-limit-vs-scatter", fwd_err, limit_tol),
        Measurement("backward-limit-vs-input", bwd_err, limit_tol),
    ]
    rows = [(t, w, +1) for t, w in report.samples_forward]
    rows += [(t, w, -1) for t, w in report.samples_backward]
    art = _write_csv(out_dir, "radial_decay.csv", ["t", "abs_w", "direction"], rows)
    rep = CheckReport(name="radial", measured=measured, control=mutate)
    if art:
        rep.artifacts.append(art)
    return rep


def check_egorov(spec: PerturbationSpec, grid: _q.Grid, Z0, frak0, h_list,
                 params: _q.SolverParams | None = None,
                 rel_cap: float = 0.05, abs_cap: float = 1e-6,
                 tol_flow: float = 1e-12, crosscheck_tol: float = 1e-8,
                 mutate_target: bool = False, out_dir=None) -> CheckReport:
    """Wavepacket moments of the quantum map track the classical map.

    e(h) must decrease along the (decreasing) h list and the final error
    must stay below ``rel_cap`` times the classical displacement.  When the
    classical map leaves the beam fixed (flat or pure-potential control
    runs), the absolute errors are capped by ``abs_cap`` instead and no
    trend is required.  The classical prediction is cross-validated against
    the radial-convergence diagnostic (an independent code path)."""
    params = params or _q.SolverParams()
    h_list = list(h_list)
    if len(h_list) > 1 and not all(h_list[i] > h_list[i + 1] for i in range(len(h_list) - 1)):
        raise ValidationError("h_list must be strictly decreasing",
                              invariant="egorov-h-list-decreasing")
    c_in = CuspData(Z=np.atleast_1d(Z0), frak=np.atleast_1d(frak0))
    scatter = _flow.classical_scatter(spec, c_in, tol=tol_flow)
    target = scatter.c_out.pair()
    displacement = scatter.displacement
    if mutate_target:
        # reflected classical image: the broken prediction must fail
        target = 2.0 * c_in.pair() - target

    window = spec.time_window() or (-1.0, 1.0)
    radial = _flow.radial_convergence(spec, bichar_from_cusp(c_in, window[0] - 2.0),
                                      horizon=1e6, tol=tol_flow)
    cross = float(np.max(np.abs(radial.limit_forward.pair() - target)))

    errors = []
    rows = []
    for h in h_list:
        f = _q.coherent_data(grid, c_in.Z, c_in.frak, h)
        fp = _q.scattering_map(spec, f, params)
        zbar, frakbar = _q.packet_moments(fp)
        e = float(np.linalg.norm(np.concatenate([zbar, frakbar]) - target))
        errors.append(e)
        rows.append((h, e, e / displacement if displacement else np.nan))
    measured = [Measurement("classical-crosscheck", cross, crosscheck_tol)]
    if displacement > 0.0:
        trend = max((errors[i + 1] - errors[i] for i in range(len(errors) - 1)),
                    default=-1.0)
        measured.append(Measurement("moment-error-trend", float(trend), 0.0))
        measured.append(Measurement("final-relative-error",
                                    errors[-1] / displacement, rel_cap))
    else:
        measured.append(Measurement("max-absolute-moment-drift",
                                    float(max(errors)), abs_cap))
    art = _write_csv(out_dir, "egorov_errors.csv", ["h", "error", "relative"], rows)
    rep = CheckReport(name="egorov", measured=measured, control=mutate_target,
                      note=f"classical displacement {displacement:.6g}")
    if art:
        rep.artifacts.append(art)
    return rep


def check_eikonal_phase(spec: PerturbationSpec, grid: _q.Grid, Z0, frak0,
                        h: float = 0.25, params: _q.SolverParams | None = None,
                        rel_tol: float = 0.05, abs_tol: float = 0.01,
                        linearity_tol: float = 0.1, mutate_sign: bool = False,
                        out_dir=None) -> CheckReport:
    """arg<Sf, f> equals minus the potential integral along the straight beam.

    The classical side is computed by adaptive quadrature; the perturbation
    must have a flat metric and a weak real potential.  Doubling the
    amplitude must double the measured phase within ``linearity_tol``.
    ``mutate_sign`` compares against the sign-flipped integral (must fail)."""
    params = params or _q.SolverParams()
    if not spec.metric_is_flat:
        raise ValidationError("eikonal check requires a flat metric",
                              invariant="eikonal-flat-metric")
    sup = max((abs(p.amplitude) for p in spec.potential_terms), default=0.0)
    if sup > 0.1 + 1e-12:
        raise ValidationError("eikonal check requires ||V|| <= 0.1",
                              invariant="eikonal-weak-potential")
    Z0 = np.atleast_1d(np.asarray(Z0, dtype=float))
    frak0 = np.atleast_1d(np.asarray(frak0, dtype=float))

    def classical_phase(s):
        window = s.time_window()
        if window is None:
            return 0.0

        def v_on_beam(t):
            return s.potential(2.0 * t * Z0 - frak0, t).real

        val, _ = quad(v_on_beam, window[0], window[1], epsabs=1e-12, limit=200)
        return -val

    def numeric_phase(s):
        f = _q.coherent_data(grid, Z0, frak0, h)
        fp = _q.scattering_map(s, f, params)
        return float(np.angle(fp.inner(f)))

    phi_cl = classical_phase(spec)
    if mutate_sign:
        phi_cl = -phi_cl
    phi_num = numeric_phase(spec)
    measured = [Measurement("phase-mismatch", abs(phi_num - phi_cl),
                            rel_tol * abs(phi_cl) + abs_tol)]
    phi_num2 = None
    if abs(phi_num) > 1e-6:      # linearity ratio is meaningful
        doubled = PerturbationSpec(
            n=spec.n,
            bumps=spec.bumps,
            potential_terms=tuple(replace(p, amplitude=2.0 * p.amplitude)
                                  for p in spec.potential_terms),
        )
        phi_num2 = numeric_phase(doubled)
        lin = abs(phi_num2 / (2.0 * phi_num) - 1.0)
        measured.append(Measurement("amplitude-linearity", float(lin), linearity_tol))
    art = _write_csv(out_dir, "eikonal_phase.csv",
                     ["phi_numeric", "phi_classical", "phi_doubled"],
                     [(phi_num, phi_cl,
                       phi_num2 if phi_num2 is not None else float("nan"))])
    rep = CheckReport(name="eikonal", measured=measured, control=mutate_sign,
                      note=f"phi_num={phi_num:.6g} phi_cl={phi_cl:.6g}")
    if art:
        rep.artifacts.append(art)
    return rep


def _packet_width(grid, h, t):
    """Physical 1-sigma width of the coherent packet at time t."""
    return float(np.sqrt((1.0 + 4.0 * h**2 * t**2) / (2.0 * h)))


def check_highfreq_identity(spec: PerturbationSpec, grid: _q.Grid, Z0,
                            frak_far, frak_through=None, h: float = 0.5,
                            params: _q.SolverParams | None = None,
                            tol: float = 1e-3, control_floor: float = 1e-1,
                            out_dir=None) -> CheckReport:
    """Beams offset far (in the 1-cusp frequency) from the perturbation are
    scattered trivially; a beam through it is not (positive control)."""
    params = params or _q.SolverParams()
    Z0 = np.atleast_1d(np.asarray(Z0, dtype=float))
    frak_far = np.atleast_1d(np.asarray(frak_far, dtype=float))
    window = spec.time_window()

    if window is not None:
        # precondition: the beam must miss the support by >= 5 packet widths
        width = _packet_width(grid, h, max(abs(window[0]), abs(window[1])))
        min_dist = np.inf
        for term in spec.terms():
            ts = np.linspace(term.center_t - term.radius_t,
                             term.center_t + term.radius_t, 101)
            beams = 2.0 * ts[:, None] * Z0 - frak_far
            d = np.linalg.norm(beams - term.center_z, axis=1) - term.radius_z
            min_dist = min(min_dist, float(np.min(d)))
        if min_dist < 5.0 * width:
            raise ValidationError(
                f"beam misses the support by {min_dist:.3g} < 5 packet widths "
                f"({5 * width:.3g})", invariant="highfreq-beam-offset")

    def defect(frak):
        f = _q.coherent_data(grid, Z0, frak, h)
        fp = _q.scattering_map(spec, f, params)
        return float(np.linalg.norm(fp.values - f.values) / np.linalg.norm(f.values))

    far = defect(frak_far)
    measured = [Measurement("far-beam-defect", far, tol)]
    rows = [(float(np.linalg.norm(frak_far)), far)]
    if frak_through is not None:
        through = defect(np.atleast_1d(np.asarray(frak_through, dtype=float)))
        measured.append(Measurement("control-discriminates",
                                    float(control_floor - through), 0.0))
        rows.append((float(np.linalg.norm(np.atleast_1d(frak_through))), through))
    art = _write_csv(out_dir, "highfreq_defects.csv", ["frak_offset", "defect"], rows)
    rep = CheckReport(name="highfreq", measured=measured)
    if art:
        rep.artifacts.append(art)
    return rep


def _noncompact_test_functions(grid):
    """Three fixed smooth test functions on the dual grid."""
    mesh = grid.mesh_Z()
    r2 = sum(m**2 for m in mesh)
    phis = [
        np.exp(-r2 / 2.0),
        mesh[0] * np.exp(-r2 / 4.0),
        np.cos(mesh[0]) * np.exp(-r2 / 3.0),
    ]
    return [_q.SpectralData(grid=grid, values=p.astype(complex)) for p in phis]


def check_noncompactness(spec: PerturbationSpec, grid: _q.Grid, Z0, frak0,
                         h_list=(0.1, 0.05, 0.02, 0.01),
                         params: _q.SolverParams | None = None,
                         c_floor: float | None = None,
                         control: bool = False, out_dir=None) -> CheckReport:
    """A weakly-null coherent family keeps ||(S - Id) f_k|| bounded below.

    The floor c defaults to half the value sqrt(2 - 2 Re<Sf, f>) observed at
    the largest h; controls (e.g. the flat spec, whose self-derived floor
    degenerates to zero) pass an explicit positive floor the family must
    fail to clear.  Weak nullity is proxied by |<f_k, phi>| decreasing for
    three fixed test functions."""
    params = params or _q.SolverParams()
    Z0 = np.atleast_1d(np.asarray(Z0, dtype=float))
    frak0 = np.atleast_1d(np.asarray(frak0, dtype=float))
    h_list = list(h_list)
    phis = _noncompact_test_functions(grid)

    norms = []
    overlaps = []
    rows = []
    for h in h_list:
        f = _q.coherent_data(grid, Z0, frak0, h)
        fp = _q.scattering_map(spec, f, params)
        diff = _q.SpectralData(grid=grid, values=fp.values - f.values)
        norms.append(diff.norm())
        if c_floor is None:
            c_floor = 0.5 * float(np.sqrt(max(2.0 - 2.0 * np.real(fp.inner(f)), 0.0)))
        ov = [abs(f.inner(phi)) for phi in phis]
        overlaps.append(ov)
        rows.append((h, norms[-1], *ov))

    overlaps = np.array(overlaps)
    weak_trend = float(np.max(np.diff(overlaps, axis=0))) if len(h_list) > 1 else -1.0
    measured = [
        Measurement("weak-null-trend", weak_trend, 0.0),
        Measurement("difference-norm-floor", float(c_floor - min(norms)), 0.0),
        Measurement("difference-norm-ceiling", float(max(norms)), 2.0 + 1e-9),
    ]
    art = _write_csv(out_dir, "noncompact_family.csv",
                     ["h", "diff_norm", "overlap_1", "overlap_2", "overlap_3"], rows)
    rep = CheckReport(name="noncompact", measured=measured, control=control,
                      note=f"floor c = {c_floor:.6g}")
    if art:
        rep.artifacts.append(art)
    return rep
