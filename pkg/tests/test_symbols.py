"""Operator model: mollifier, metric assembly, analytic derivatives."""

import numpy as np
import pytest
from scipy.integrate import quad

from cusplab.errors import NotPositiveDefinite
from cusplab.phasespace import PhasePoint
from cusplab.symbols import (
    MetricBump,
    PerturbationSpec,
    PotentialTerm,
    bump,
    bump_derivative,
    flat_spec,
    potential,
    principal_symbol,
    symbol_jet,
)


def _bump_spec(eps=0.05, n=2, pattern=None, radius_z=1.0, radius_t=1.0):
    pattern = np.eye(n) if pattern is None else pattern
    return PerturbationSpec(n=n, bumps=(MetricBump(
        amplitude=eps, center_z=np.zeros(n), center_t=0.0,
        radius_z=radius_z, radius_t=radius_t, pattern=pattern),))


def test_bump_normalization_and_support():
    assert bump(0.0) == 1.0
    assert bump(1.0) == 0.0
    assert bump(-1.0) == 0.0
    assert bump(1.5) == 0.0
    r = np.linspace(0.0, 0.999, 400)
    vals = bump(r)
    assert np.all(np.diff(vals) < 0)           # monotone decrease on [0, 1)
    assert np.all(bump(np.linspace(1.0, 5.0, 50)) == 0.0)


def test_bump_derivative_matches_finite_differences():
    h = 1e-6
    fd = (bump(0.5 + h) - bump(0.5 - h)) / (2 * h)
    assert abs(fd - bump_derivative(0.5)) < 1e-8


def test_inverse_metric_identity_outside_support():
    spec = _bump_spec()
    g, dgdz, dgdt = spec.inverse_metric_jet([3.0, 0.0], 0.0)
    assert np.array_equal(g, np.eye(2))
    assert np.all(dgdz == 0.0) and np.all(dgdt == 0.0)
    g2, _, _ = spec.inverse_metric_jet([0.0, 0.0], 5.0)
    assert np.array_equal(g2, np.eye(2))


def test_inverse_metric_center_value():
    spec = _bump_spec(eps=0.05)
    g = spec.inverse_metric([0.0, 0.0], 0.0)
    assert np.allclose(g, 1.05 * np.eye(2), atol=1e-15)


def test_inverse_metric_gradients_match_finite_differences():
    pattern = np.array([[1.0, 0.3], [0.3, 0.5]])
    spec = _bump_spec(eps=0.08, pattern=pattern)
    rng = np.random.default_rng(5)
    h = 1e-6
    for _ in range(50):
        z = rng.uniform(-0.9, 0.9, 2)
        t = float(rng.uniform(-0.9, 0.9))
        if np.linalg.norm(z) > 0.95:
            continue
        _, dgdz, dgdt = spec.inverse_metric_jet(z, t)
        for axis in range(2):
            dz = np.zeros(2)
            dz[axis] = h
            fd = (spec.inverse_metric(z + dz, t) - spec.inverse_metric(z - dz, t)) / (2 * h)
            assert np.max(np.abs(fd - dgdz[:, :, axis])) < 1e-7
        fd_t = (spec.inverse_metric(z, t + h) - spec.inverse_metric(z, t - h)) / (2 * h)
        assert np.max(np.abs(fd_t - dgdt)) < 1e-7


def test_principal_symbol_examples():
    spec = flat_spec(2)
    assert principal_symbol(spec, PhasePoint(z=[0, 0], t=0, zeta=[1, 0], tau=-1)) == 0.0
    assert principal_symbol(spec, PhasePoint(z=[0, 0], t=0, zeta=[0, 0], tau=3)) == 3.0
    bump_spec = _bump_spec(eps=0.05)
    val = principal_symbol(bump_spec, PhasePoint(z=[0, 0], t=0, zeta=[1, 0], tau=-1))
    assert abs(val - 0.05) < 1e-14


def test_principal_symbol_flat_outside_support_bit_exact():
    spec = _bump_spec()
    p = PhasePoint(z=[2.0, 1.0], t=0.3, zeta=[0.7, -0.2], tau=0.11)
    flat_value = p.tau + float(p.zeta @ p.zeta)
    assert principal_symbol(spec, p) == flat_value


def test_symbol_jet_matches_finite_differences_on_characteristic():
    pattern = np.array([[1.0, -0.2], [-0.2, 0.8]])
    spec = _bump_spec(eps=0.06, pattern=pattern)
    rng = np.random.default_rng(8)
    h = 1e-6
    for _ in range(20):
        z = rng.uniform(-0.8, 0.8, 2)
        t = float(rng.uniform(-0.8, 0.8))
        zeta = rng.uniform(-1.5, 1.5, 2)
        tau = -float(zeta @ spec.inverse_metric(z, t) @ zeta)
        p = PhasePoint(z=z, t=t, zeta=zeta, tau=tau)
        jet = symbol_jet(spec, p)
        assert jet.dp_dtau == 1.0
        scale = 1.0 + abs(jet.p)

        def ps(dz=np.zeros(2), dt=0.0, dzeta=np.zeros(2), dtau=0.0):
            return principal_symbol(spec, PhasePoint(
                z=z + dz, t=t + dt, zeta=zeta + dzeta, tau=tau + dtau))

        for axis in range(2):
            e = np.zeros(2)
            e[axis] = h
            assert abs((ps(dz=e) - ps(dz=-e)) / (2 * h) - jet.dp_dz[axis]) < 1e-6 * scale
            assert abs((ps(dzeta=e) - ps(dzeta=-e)) / (2 * h)
                       - jet.dp_dzeta[axis]) < 1e-6 * scale
        assert abs((ps(dt=h) - ps(dt=-h)) / (2 * h) - jet.dp_dt) < 1e-6 * scale
        assert abs((ps(dtau=h) - ps(dtau=-h)) / (2 * h) - 1.0) < 1e-6


def test_potential_examples():
    spec = PerturbationSpec(n=1, potential_terms=(PotentialTerm(
        amplitude=0.3 - 0.1j, center_z=[0.5], center_t=0.0,
        radius_z=1.0, radius_t=1.0),))
    assert potential(spec, [5.0], 0.0) == 0.0
    assert potential(spec, [0.5], 5.0) == 0.0
    assert abs(potential(spec, [0.5], 0.0) - (0.3 - 0.1j)) < 1e-15


def test_potential_quadrature_along_beam_matches_adaptive_oracle():
    spec = PerturbationSpec(n=1, potential_terms=(PotentialTerm(
        amplitude=0.2, center_z=[0.0], center_t=0.0, radius_z=1.0, radius_t=1.0),))
    Z0, frak0 = 1.0, 0.3

    def v_beam(t):
        return spec.potential([2 * t * Z0 - frak0], t).real

    oracle, _ = quad(v_beam, -1.0, 1.0, epsabs=1e-13, epsrel=1e-13)
    # composite Gauss-Legendre, the quadrature used along trajectories
    nodes, weights = np.polynomial.legendre.leggauss(10)
    total = 0.0
    edges = np.linspace(-1.0, 1.0, 25)
    for a, b in zip(edges[:-1], edges[1:]):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        total += half * np.sum(weights * np.array([v_beam(mid + half * x) for x in nodes]))
    assert abs(total - oracle) < 1e-8


def test_positive_definiteness_validation():
    with pytest.raises(NotPositiveDefinite):
        _bump_spec(eps=-1.2)


def test_positive_definite_lattice_accepts_valid_spec():
    spec = _bump_spec(eps=0.3, pattern=np.array([[1.0, 0.9], [0.9, 1.0]]))
    assert spec.inverse_metric([0.0, 0.0], 0.0)[0, 0] == pytest.approx(1.3)


def test_dt_log_det_metric_field():
    spec = _bump_spec(eps=0.1, n=1)
    pts = np.array([[0.0], [0.3], [2.0]])
    h = 1e-6
    vals = spec.dt_log_det_metric_field(pts, 0.2)
    for i, z in enumerate(pts):
        a_p = spec.inverse_metric(z, 0.2 + h)[0, 0]
        a_m = spec.inverse_metric(z, 0.2 - h)[0, 0]
        fd = -(np.log(a_p) - np.log(a_m)) / (2 * h)   # det g = 1 / g^{11}
        assert abs(vals[i] - fd) < 1e-7
