"""Grid solutions, exact free propagation, and the quantum scattering map.

Fourier convention, fixed once and threaded everywhere:

    FT(u)(Z)  = integral e^{-i z.Z} u(z) dz,
    u(z)      = (2 pi)^{-n} integral e^{+i z.Z} FT(u)(Z) dZ,

so that the asymptotic data of a solution is literally
f(Z) = e^{+i t |Z|^2} FT(u)(Z) at any time t on the free side, and the free
solution with data f is u(., t) = invFT[e^{-i t |Z|^2} f].

The propagator splits time into perturbation-free gaps, handled by the exact
spectral multiplier, and active windows, handled by Crank-Nicolson (n = 1,
cyclic tridiagonal solves) or Strang splitting (n = 2, best effort).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import (
    BoundaryLeak,
    ConvergenceFailure,
    InsideWindow,
    PacketClipped,
    ValidationError,
    ZeroMass,
)
from .symbols import PerturbationSpec

ACTIVE_MARGIN = 1e-9   # relative inflation of term time-windows
LEAK_THRESHOLD = 1e-6
SHELL_FRACTION = 0.05


# ---------------------------------------------------------------------------
# grid and transforms


@dataclass(frozen=True)
class Grid:
    """Periodic box [-L, L)^n with N points per axis and its dual grid."""

    n: int
    N: int
    L: float

    def __post_init__(self):
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "L", float(self.L))
        if self.n not in (1, 2):
            raise ValueError("grid dimension must be 1 or 2")
        if self.N < 4 or (self.N & (self.N - 1)) != 0:
            raise ValueError("N must be a power of two >= 4")
        if self.L <= 0:
            raise ValueError("L must be positive")

    @property
    def dz(self) -> float:
        return 2.0 * self.L / self.N

    @property
    def dZ(self) -> float:
        return np.pi / self.L

    @property
    def z_max(self) -> float:
        """Edge of the dual grid: |Z| < z_max per axis."""
        return 0.5 * self.N * self.dZ

    def axis_z(self) -> np.ndarray:
        return (np.arange(self.N) - self.N // 2) * self.dz

    def axis_Z(self) -> np.ndarray:
        return (np.arange(self.N) - self.N // 2) * self.dZ

    def mesh_z(self):
        return np.meshgrid(*([self.axis_z()] * self.n), indexing="ij")

    def mesh_Z(self):
        return np.meshgrid(*([self.axis_Z()] * self.n), indexing="ij")

    def points_z(self) -> np.ndarray:
        """(N^n, n) array of physical points in row-major order."""
        mesh = self.mesh_z()
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def dual_norm_sq(self) -> np.ndarray:
        mesh = self.mesh_Z()
        return sum(m**2 for m in mesh)

    def shape(self):
        return (self.N,) * self.n


def forward_ft(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Discrete FT(u)(Z) on the dual grid (math ordering, origin centred)."""
    return grid.dz**grid.n * np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(values)))


def inverse_ft(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Inverse of :func:`forward_ft` (exact round trip on the grid)."""
    return grid.dz**(-grid.n) * np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(values)))


@dataclass(frozen=True)
class WaveField:
    """Complex field on the physical grid at a fixed time."""

    grid: Grid
    values: np.ndarray
    time: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape != self.grid.shape():
            raise ValueError(f"values must have shape {self.grid.shape()}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "time", float(self.time))

    def norm(self) -> float:
        return float(np.sqrt(self.grid.dz**self.grid.n * np.sum(np.abs(self.values) ** 2)))

    def inner(self, other: "WaveField") -> complex:
        return complex(self.grid.dz**self.grid.n * np.sum(self.values * np.conj(other.values)))

    def boundary_leak_fraction(self) -> float:
        """Mass fraction in the outer 5% shell of the box."""
        z = np.abs(self.grid.axis_z())
        edge = (1.0 - SHELL_FRACTION) * self.grid.L
        mask1d = z >= edge
        w = np.abs(self.values) ** 2
        total = float(np.sum(w))
        if total == 0.0:
            return 0.0
        if self.grid.n == 1:
            shell = float(np.sum(w[mask1d]))
        else:
            m = mask1d[:, None] | mask1d[None, :]
            shell = float(np.sum(w[m]))
        return shell / total


@dataclass(frozen=True)
class SpectralData:
    """Samples of asymptotic data f(Z) on the dual grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape != self.grid.shape():
            raise ValueError(f"values must have shape {self.grid.shape()}")
        object.__setattr__(self, "values", vals)

    def norm(self) -> float:
        return float(np.sqrt(self.grid.dZ**self.grid.n * np.sum(np.abs(self.values) ** 2)))

    def inner(self, other: "SpectralData") -> complex:
        """<f, g> = sum f conj(g) dZ^n."""
        return complex(self.grid.dZ**self.grid.n * np.sum(self.values * np.conj(other.values)))

    def outer_band_fraction(self, fraction: float = 0.25) -> float:
        """Mass fraction carried by the outer ``fraction`` of frequencies."""
        Zs = np.abs(self.grid.axis_Z())
        cut = (1.0 - fraction) * self.grid.z_max
        mask1d = Zs >= cut
        w = np.abs(self.values) ** 2
        total = float(np.sum(w))
        if total == 0.0:
            return 0.0
        if self.grid.n == 1:
            outer = float(np.sum(w[mask1d]))
        else:
            m = mask1d[:, None] | mask1d[None, :]
            outer = float(np.sum(w[m]))
        return outer / total


# ---------------------------------------------------------------------------
# exact free operations


def free_propagate(u: WaveField, dt: float) -> WaveField:
    """Exact free solver on the box: multiply FT(u) by e^{-i dt |Z|^2}."""
    dt = float(dt)
    if dt == 0.0:
        return u
    f_hat = forward_ft(u.grid, u.values)
    f_hat *= np.exp(-1j * dt * u.grid.dual_norm_sq())
    return WaveField(grid=u.grid, values=inverse_ft(u.grid, f_hat), time=u.time + dt)


def poisson_free(f: SpectralData, t: float) -> WaveField:
    """The free solution with asymptotic data f, sampled at time t."""
    t = float(t)
    mult = np.exp(-1j * t * f.grid.dual_norm_sq())
    return WaveField(grid=f.grid, values=inverse_ft(f.grid, mult * f.values), time=t)


def extract_asymptotic(u: WaveField, spec: PerturbationSpec | None = None) -> SpectralData:
    """Asymptotic data f(Z) = e^{+i t |Z|^2} FT(u)(Z) of a free-side field.

    Raises InsideWindow when ``spec`` is active at the field's time.
    """
    if spec is not None:
        window = spec.time_window()
        if window is not None and window[0] < u.time < window[1]:
            raise InsideWindow(
                f"t = {u.time} lies inside the perturbation window {window}")
    f_hat = forward_ft(u.grid, u.values)
    return SpectralData(grid=u.grid, values=np.exp(1j * u.time * u.grid.dual_norm_sq()) * f_hat)


def _trig_interp_matrix(grid: Grid, targets: np.ndarray) -> np.ndarray:
    """Evaluation matrix of the dual-grid trigonometric interpolant."""
    N = grid.N
    m = np.arange(N) - N // 2
    kappa = np.pi * m / grid.z_max
    return np.exp(1j * np.outer(targets, kappa))


def _trig_interp_axis_coeffs(grid: Grid, values: np.ndarray) -> np.ndarray:
    """DFT coefficients a_m such that f(Z) = sum_m a_m e^{i pi m Z / Zmax}."""
    axes = tuple(range(values.ndim))
    return np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(values)), axes=axes) / grid.N**values.ndim


def asymptotic_profile_error(f: SpectralData, t: float, chunk: int = 512) -> float:
    """Relative L2 mismatch between the free solution and its large-|t| profile.

    Compares u = poisson_free(f, t) against
    v(z) = (4 pi i t)^{-n/2} e^{i |z|^2 / 4t} f(z / 2t), with the branch
    (4 pi i t)^{-n/2} = |4 pi t|^{-n/2} e^{-/+ i pi n / 4} for t >< 0 and f
    evaluated by band-limited (trigonometric) interpolation.
    """
    t = float(t)
    if t == 0.0:
        raise ValueError("profile comparison requires t != 0")
    grid = f.grid
    u = poisson_free(f, t)

    coeffs = _trig_interp_axis_coeffs(grid, f.values)
    targets = grid.axis_z() / (2.0 * t)
    if np.max(np.abs(targets)) >= grid.z_max:
        raise ValidationError("profile targets leave the dual grid",
                              invariant="profile-targets-in-dual-grid")

    if grid.n == 1:
        interp = np.empty(grid.N, dtype=complex)
        for i0 in range(0, grid.N, chunk):
            block = targets[i0:i0 + chunk]
            interp[i0:i0 + chunk] = _trig_interp_matrix(grid, block) @ coeffs
    else:
        e_mat = _trig_interp_matrix(grid, targets)
        interp = e_mat @ coeffs @ e_mat.T

    mesh = grid.mesh_z()
    z_sq = sum(m**2 for m in mesh)
    branch = np.exp(-1j * np.pi * grid.n / 4.0) if t > 0 else np.exp(1j * np.pi * grid.n / 4.0)
    prefactor = np.abs(4.0 * np.pi * t) ** (-grid.n / 2.0) * branch
    v = prefactor * np.exp(1j * z_sq / (4.0 * t)) * interp.reshape(grid.shape())

    diff = np.sqrt(np.sum(np.abs(u.values - v) ** 2))
    ref = np.sqrt(np.sum(np.abs(u.values) ** 2))
    return float(diff / ref)


# ---------------------------------------------------------------------------
# solver configuration


@dataclass(frozen=True)
class SolverParams:
    """Numerical parameters of the window propagator."""

    dt: float = 1e-3
    margin: float = 0.25
    measure_compensated: bool = True
    leak_threshold: float = LEAK_THRESHOLD
    pert_substeps: int = 4     # n = 2 remainder substeps per Strang step

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")


def _active_intervals(spec: PerturbationSpec, t_from: float, t_to: float):
    """Merged perturbation-active subintervals of [t_from, t_to]."""
    raw = []
    for term in spec.terms():
        rt = term.radius_t * (1.0 + ACTIVE_MARGIN)
        lo, hi = term.center_t - rt, term.center_t + rt
        lo, hi = max(lo, t_from), min(hi, t_to)
        if lo < hi:
            raw.append((lo, hi))
    raw.sort()
    merged = []
    for lo, hi in raw:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


# ---------------------------------------------------------------------------
# cyclic tridiagonal Crank-Nicolson (n = 1)


def solve_cyclic_tridiagonal(lower, diag, upper, corner_ul, corner_lr, rhs):
    """Solve a cyclic tridiagonal system by Sherman-Morrison.

    ``lower[j]`` couples row j to j-1, ``upper[j]`` couples row j to j+1,
    ``corner_ul`` is the (0, N-1) entry and ``corner_lr`` the (N-1, 0) entry.
    """
    N = diag.size
    gamma = -diag[0]
    d = diag.copy()
    d[0] -= gamma
    d[-1] -= corner_ul * corner_lr / gamma

    ab = np.zeros((3, N), dtype=complex)
    ab[0, 1:] = upper[:-1]
    ab[1, :] = d
    ab[2, :-1] = lower[1:]

    u = np.zeros(N, dtype=complex)
    u[0] = gamma
    u[-1] = corner_lr
    stacked = solve_banded((1, 1), ab, np.column_stack([rhs, u]))
    y, q = stacked[:, 0], stacked[:, 1]
    # v = e_0 + (corner_ul / gamma) e_{N-1}
    vy = y[0] + corner_ul / gamma * y[-1]
    vq = q[0] + corner_ul / gamma * q[-1]
    return y - vy / (1.0 + vq) * q


def _apply_cyclic_tridiagonal(lower, diag, upper, corner_ul, corner_lr, x):
    out = diag * x
    out[1:] += lower[1:] * x[:-1]
    out[:-1] += upper[:-1] * x[1:]
    out[0] += corner_ul * x[-1]
    out[-1] += corner_lr * x[0]
    return out


class _CyclicTridiag:
    """Cyclic tridiagonal operator with apply and solve."""

    def __init__(self, lower, diag, upper, corner_ul, corner_lr):
        self.lower, self.diag, self.upper = lower, diag, upper
        self.corner_ul, self.corner_lr = corner_ul, corner_lr

    def apply(self, x):
        return _apply_cyclic_tridiagonal(self.lower, self.diag, self.upper,
                                         self.corner_ul, self.corner_lr, x)

    def solve(self, rhs):
        return solve_cyclic_tridiagonal(self.lower, self.diag, self.upper,
                                        self.corner_ul, self.corner_lr, rhs)


def _divergence_bands(c_face, dz):
    """Bands of the positive divergence-form operator K with face
    coefficients c_face[j] = c(z_j + dz/2), periodic."""
    c_left = np.roll(c_face, 1)
    diag = (c_face + c_left) / dz**2
    upper = -c_face / dz**2                      # couples j -> j+1
    lower = -c_left / dz**2                      # couples j -> j-1
    corner_ul = -c_left[0] / dz**2               # (0, N-1)
    corner_lr = -c_face[-1] / dz**2              # (N-1, 0)
    return lower, diag, upper, corner_ul, corner_lr


def _hamiltonian_bands_forward(spec, grid, t_mid, compensated):
    """Bands of the symmetrized spatial operator + potential at t_mid.

    The field propagated is the half-density conjugate v = |g|^{1/4} u, whose
    generator is w K w + V_eff with w = (g^{11})^{1/4}; this is exactly
    symmetric, so Crank-Nicolson conserves the discrete norm whenever V_eff
    is real.
    """
    pts = grid.axis_z()[:, None]
    faces = (grid.axis_z() + 0.5 * grid.dz)[:, None]
    a_face = spec.inverse_metric_field(faces, t_mid)[:, 0, 0]
    a_pts = spec.inverse_metric_field(pts, t_mid)[:, 0, 0]
    c_face = np.sqrt(a_face)
    w = a_pts**0.25

    lower, diag, upper, cul, clr = _divergence_bands(c_face, grid.dz)
    lower = w * lower * np.roll(w, 1)
    upper = w * upper * np.roll(w, -1)
    diag = w * diag * w
    cul = w[0] * cul * w[-1]
    clr = w[-1] * clr * w[0]

    v_eff = spec.potential_field(pts, t_mid).astype(complex)
    if not compensated:
        v_eff = v_eff + 0.25j * spec.dt_log_det_metric_field(pts, t_mid)
    diag = diag.astype(complex) + v_eff
    return _CyclicTridiag(lower.astype(complex), diag, upper.astype(complex),
                          complex(cul), complex(clr))


def _hamiltonian_bands_adjoint(spec, grid, t_mid, compensated):
    """Bands of the adjoint operator K M_{1/sqrt|g|} + conj(V_eff) at t_mid.

    This is the plain-measure adjoint of the direct divergence-form
    discretization of the spatial operator, built independently of the
    forward scheme.
    """
    pts = grid.axis_z()[:, None]
    faces = (grid.axis_z() + 0.5 * grid.dz)[:, None]
    a_face = spec.inverse_metric_field(faces, t_mid)[:, 0, 0]
    a_pts = spec.inverse_metric_field(pts, t_mid)[:, 0, 0]
    c_face = np.sqrt(a_face)
    s = np.sqrt(a_pts)    # 1 / sqrt(det g) in one dimension

    lower, diag, upper, cul, clr = _divergence_bands(c_face, grid.dz)
    # (K M_s): column scaling
    lower = lower * np.roll(s, 1)
    upper = upper * np.roll(s, -1)
    diag = diag * s
    cul = cul * s[-1]
    clr = clr * s[0]

    v_eff = spec.potential_field(pts, t_mid).astype(complex)
    if compensated:
        v_eff = v_eff - 0.25j * spec.dt_log_det_metric_field(pts, t_mid)
    diag = diag.astype(complex) + np.conj(v_eff)
    return _CyclicTridiag(lower.astype(complex), diag, upper.astype(complex),
                          complex(cul), complex(clr))


def _cn_march_1d(spec, grid, values, t0, t1, dt, compensated, adjoint=False):
    """Crank-Nicolson march of an active interval; handles either direction."""
    span = t1 - t0
    m = max(1, int(np.ceil(abs(span) / dt - 1e-12)))
    step = span / m
    v = values.copy()
    for k in range(m):
        t_mid = t0 + (k + 0.5) * step
        if adjoint:
            ham = _hamiltonian_bands_adjoint(spec, grid, t_mid, compensated)
        else:
            ham = _hamiltonian_bands_forward(spec, grid, t_mid, compensated)
        c = 0.5j * step
        rhs = v - c * ham.apply(v)
        plus = _CyclicTridiag(c * ham.lower, 1.0 + c * ham.diag, c * ham.upper,
                              c * ham.corner_ul, c * ham.corner_lr)
        try:
            v = plus.solve(rhs)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceFailure(f"implicit step at t={t_mid:.6g} failed: "
                                     f"{exc}") from exc
        if not np.all(np.isfinite(v)):
            raise ConvergenceFailure(f"implicit step at t={t_mid:.6g} produced "
                                     "non-finite values")
    return v


# ---------------------------------------------------------------------------
# Strang splitting with sparse remainder (n = 2)


def _remainder_matrix_2d(spec, grid, t, compensated, adjoint=False):
    """Sparse remainder (Delta_g - Delta_0 + V_eff) at time t (n = 2).

    Centred differences of the expanded divergence form

        Delta_g - Delta_0 = -(g^{jk} - d^{jk}) d_j d_k - b_k d_k,
        b_k = sum_j [d_j g^{jk} + g^{jk} d_j log sqrt(det g)],

    with analytic coefficient fields.  The metric part is symmetrized for
    the forward scheme; the adjoint scheme uses its transpose with the
    conjugate potential.  Rows and columns vanish off the footprint."""
    import scipy.sparse as sp

    N, dz = grid.N, grid.dz
    pts = grid.points_z()
    g, dgdz = spec.inverse_metric_jet_field(pts, t)
    dev = g - np.eye(2)
    v_eff = spec.potential_field(pts, t).astype(complex)
    if adjoint:
        # plain adjoint carries the conjugate of the physical potential
        if compensated:
            v_eff = v_eff - 0.25j * spec.dt_log_det_metric_field(pts, t)
        v_eff = np.conj(v_eff)
    elif not compensated:
        # the propagated field is the half-density conjugate, whose
        # generator keeps the measure term unless the compensator eats it
        v_eff = v_eff + 0.25j * spec.dt_log_det_metric_field(pts, t)

    size = N * N
    active = np.abs(dev).sum(axis=(1, 2)) + np.abs(v_eff)
    mask = active > 1e-14
    if not np.any(mask):
        return sp.csr_matrix((size, size), dtype=complex), np.zeros(size, dtype=bool)

    # d_j log sqrt(det g) = -1/2 tr(ginv^{-1} d_j ginv)
    ginv_inv = np.linalg.inv(g)
    dlog_half = np.empty((size, 2))
    for j in range(2):
        dlog_half[:, j] = -0.5 * np.einsum("mab,mba->m", ginv_inv, dgdz[:, :, :, j])
    b = np.empty((size, 2))
    for k in range(2):
        b[:, k] = dgdz[:, 0, k, 0] + dgdz[:, 1, k, 1]
        b[:, k] += g[:, 0, k] * dlog_half[:, 0] + g[:, 1, k] * dlog_half[:, 1]

    def idx(i, j):
        return (i % N) * N + (j % N)

    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for fid in np.nonzero(mask)[0]:
        fid = int(fid)
        i, j = divmod(fid, N)
        d00, d11, d01 = dev[fid, 0, 0], dev[fid, 1, 1], dev[fid, 0, 1]
        # -(g - I)^{jk} d_j d_k, centred
        add(fid, idx(i + 1, j), -d00 / dz**2)
        add(fid, idx(i - 1, j), -d00 / dz**2)
        add(fid, idx(i, j + 1), -d11 / dz**2)
        add(fid, idx(i, j - 1), -d11 / dz**2)
        add(fid, fid, 2.0 * (d00 + d11) / dz**2)
        cross = -2.0 * d01 / (4.0 * dz**2)
        add(fid, idx(i + 1, j + 1), cross)
        add(fid, idx(i - 1, j - 1), cross)
        add(fid, idx(i + 1, j - 1), -cross)
        add(fid, idx(i - 1, j + 1), -cross)
        # -b_k d_k, centred
        add(fid, idx(i + 1, j), -b[fid, 0] / (2.0 * dz))
        add(fid, idx(i - 1, j), b[fid, 0] / (2.0 * dz))
        add(fid, idx(i, j + 1), -b[fid, 1] / (2.0 * dz))
        add(fid, idx(i, j - 1), b[fid, 1] / (2.0 * dz))

    metric = sp.csr_matrix((vals, (rows, cols)), shape=(size, size))
    if adjoint:
        metric = metric.T.tocsr()
    else:
        metric = (0.5 * (metric + metric.T)).tocsr()
    mat = (metric + sp.diags(np.where(mask, v_eff, 0.0), format="csr")).tocsr()

    footprint = np.zeros(size, dtype=bool)
    footprint[mat.nonzero()[0]] = True
    footprint[mat.nonzero()[1]] = True
    return mat, footprint


def _strang_march_2d(spec, grid, values, t0, t1, dt, compensated, substeps,
                     adjoint=False):
    """Strang splitting march over an active interval (n = 2)."""
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    span = t1 - t0
    m = max(1, int(np.ceil(abs(span) / dt - 1e-12)))
    step = span / m
    v = values.copy()
    phase_half = np.exp(-0.5j * step * grid.dual_norm_sq())

    def free_half(arr):
        f_hat = np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(arr)))
        return np.fft.fftshift(np.fft.ifftn(np.fft.ifftshift(phase_half * f_hat)))

    for k in range(m):
        t_a = t0 + k * step
        v = free_half(v)
        flat = v.ravel()
        sub = step / substeps
        for q in range(substeps):
            t_mid = t_a + (q + 0.5) * sub
            mat, footprint = _remainder_matrix_2d(spec, grid, t_mid, compensated,
                                                  adjoint=adjoint)
            if not np.any(footprint):
                continue
            ids = np.nonzero(footprint)[0]
            sub_mat = mat[ids][:, ids]
            eye = sp.identity(len(ids), format="csc", dtype=complex)
            c = 0.5j * sub
            rhs = flat[ids] - c * (sub_mat @ flat[ids])
            try:
                lu = spla.splu((eye + c * sub_mat).tocsc())
                flat[ids] = lu.solve(rhs)
            except RuntimeError as exc:
                raise ConvergenceFailure(f"remainder solve at t={t_mid:.6g} "
                                         f"failed: {exc}") from exc
        v = flat.reshape(grid.shape())
        v = free_half(v)
    return v


# ---------------------------------------------------------------------------
# the window propagator and scattering maps


def propagate_window(spec: PerturbationSpec, u: WaveField, t_from: float,
                     t_to: float, dt: float | None = None,
                     params: SolverParams | None = None) -> WaveField:
    """Propagate across [t_from, t_to]: exact multiplier on perturbation-free
    gaps, Crank-Nicolson (n = 1) or Strang splitting (n = 2) on active
    windows.  Raises BoundaryLeak when outer-shell mass exceeds the
    threshold."""
    params = params or SolverParams()
    if dt is None:
        dt = params.dt
    if abs(u.time - t_from) > 1e-9:
        raise ValueError(f"field time {u.time} does not match t_from={t_from}")
    if t_to <= t_from:
        raise ValueError("t_to must exceed t_from")

    intervals = _active_intervals(spec, t_from, t_to)
    field = u
    cursor = t_from
    for lo, hi in intervals:
        if lo > cursor:
            field = free_propagate(field, lo - cursor)
        if spec.n == 1:
            vals = _cn_march_1d(spec, field.grid, field.values, lo, hi, dt,
                                params.measure_compensated)
        else:
            vals = _strang_march_2d(spec, field.grid, field.values, lo, hi, dt,
                                    params.measure_compensated, params.pert_substeps)
        field = WaveField(grid=field.grid, values=vals, time=hi)
        leak = field.boundary_leak_fraction()
        if leak > params.leak_threshold:
            raise BoundaryLeak(f"outer-shell mass fraction {leak:.3e} exceeds "
                               f"{params.leak_threshold:.1e} at t={hi:.4g}")
        cursor = hi
    if cursor < t_to:
        field = free_propagate(field, t_to - cursor)
    leak = field.boundary_leak_fraction()
    if leak > params.leak_threshold:
        raise BoundaryLeak(f"outer-shell mass fraction {leak:.3e} exceeds "
                           f"{params.leak_threshold:.1e} at t={t_to:.4g}")
    return field


def _window_span(spec: PerturbationSpec, params: SolverParams):
    window = spec.time_window()
    if window is None:
        return None
    edge = max(abs(window[0]), abs(window[1]))
    return edge + params.margin


def check_band_limited(f: SpectralData, threshold: float = 1e-10):
    frac = f.outer_band_fraction(0.25)
    if frac >= threshold:
        raise ValidationError(
            f"input carries {frac:.2e} of its mass in the outer 25% of the "
            f"dual grid (threshold {threshold:.0e})",
            invariant="band-limited-input")


def scattering_map(spec: PerturbationSpec, f_minus: SpectralData,
                   params: SolverParams | None = None) -> SpectralData:
    """The scattering map: incoming asymptotic data to outgoing data.

    Realized through the final-state problem: build the free solution with
    data f_minus before the window, propagate across the window, read off
    outgoing data.  The flat operator returns its input to machine
    precision (pure multiplier path)."""
    params = params or SolverParams()
    check_band_limited(f_minus)
    span = _window_span(spec, params)
    if span is None:
        u = poisson_free(f_minus, 0.0)
        return extract_asymptotic(u, spec)
    u = poisson_free(f_minus, -span)
    u = propagate_window(spec, u, -span, span, params.dt, params)
    return extract_asymptotic(u, spec)


def adjoint_scattering_map(spec: PerturbationSpec, g_plus: SpectralData,
                           params: SolverParams | None = None) -> SpectralData:
    """Backward propagation of the adjoint equation: outgoing adjoint data
    g_plus to incoming data g_minus.  Uses the plain-measure adjoint of the
    discretized spatial operator and the conjugate potential."""
    params = params or SolverParams()
    check_band_limited(g_plus)
    span = _window_span(spec, params)
    if span is None:
        w = poisson_free(g_plus, 0.0)
        return extract_asymptotic(w, spec)
    w = poisson_free(g_plus, span)

    intervals = _active_intervals(spec, -span, span)
    field = w
    cursor = span
    for lo, hi in reversed(intervals):
        if hi < cursor:
            field = free_propagate(field, hi - cursor)
        if spec.n == 1:
            vals = _cn_march_1d(spec, field.grid, field.values, hi, lo, params.dt,
                                params.measure_compensated, adjoint=True)
        else:
            vals = _strang_march_2d(spec, field.grid, field.values, hi, lo, params.dt,
                                    params.measure_compensated, params.pert_substeps,
                                    adjoint=True)
        field = WaveField(grid=field.grid, values=vals, time=lo)
        cursor = lo
    if cursor > -span:
        field = free_propagate(field, -span - cursor)
    return extract_asymptotic(field, spec)


# ---------------------------------------------------------------------------
# coherent packets and moments


def coherent_data(grid: Grid, Z0, frak0, h: float) -> SpectralData:
    """Gaussian packet f(Z) = (pi h)^{-n/4} e^{-|Z-Z0|^2/2h} e^{i frak0.(Z-Z0)},
    unit continuum norm."""
    if h <= 0:
        raise ValueError("h must be positive")
    Z0 = np.atleast_1d(np.asarray(Z0, dtype=float))
    frak0 = np.atleast_1d(np.asarray(frak0, dtype=float))
    if Z0.size != grid.n or frak0.size != grid.n:
        raise ValueError("Z0 and frak0 must match the grid dimension")
    if np.any(np.abs(Z0) + 6.0 * np.sqrt(h) > grid.z_max):
        raise PacketClipped("6 sqrt(h) half-width leaves the dual grid")

    mesh = grid.mesh_Z()
    quad = sum((m - z0) ** 2 for m, z0 in zip(mesh, Z0))
    phase = sum(fr * (m - z0) for m, fr, z0 in zip(mesh, frak0, Z0))
    vals = (np.pi * h) ** (-grid.n / 4.0) * np.exp(-quad / (2.0 * h) + 1j * phase)

    from scipy.special import erfc
    tail = 0.0
    for z0 in Z0:
        tail += 0.5 * erfc((grid.z_max - abs(z0)) / np.sqrt(h))
        tail += 0.5 * erfc((grid.z_max + abs(z0)) / np.sqrt(h))
    if tail > 1e-8:
        raise PacketClipped(f"continuum mass {tail:.2e} outside the dual grid")
    return SpectralData(grid=grid, values=vals)


def _spectral_gradient(grid: Grid, values: np.ndarray):
    """Gradient of dual-grid data by FFT differentiation (per axis)."""
    shifted = np.fft.ifftshift(values)
    F = np.fft.fftn(shifted)
    freqs = 2.0 * np.pi * np.fft.fftfreq(grid.N, d=grid.dZ)
    grads = []
    for axis in range(grid.n):
        shape = [1] * grid.n
        shape[axis] = grid.N
        k = freqs.reshape(shape)
        grads.append(np.fft.fftshift(np.fft.ifftn(1j * k * F)))
    return grads


def packet_moments(f: SpectralData):
    """(Zbar, frakbar): centre of mass in Z and mean conjugate frequency.

    frakbar = Re < f, -i grad f > / ||f||^2, computed spectrally.
    """
    w = np.abs(f.values) ** 2
    mass = float(np.sum(w)) * f.grid.dZ**f.grid.n
    if mass <= 0.0:
        raise ZeroMass("packet has zero mass")
    mesh = f.grid.mesh_Z()
    zbar = np.array([float(np.sum(m * w)) * f.grid.dZ**f.grid.n / mass for m in mesh])
    grads = _spectral_gradient(f.grid, f.values)
    frakbar = np.array([
        float(np.real(np.sum(np.conj(f.values) * (-1j) * g)) * f.grid.dZ**f.grid.n / mass)
        for g in grads
    ])
    return zbar, frakbar


# ---------------------------------------------------------------------------
# field persistence


_CONVENTION_TAG = "ft=int e^{-izZ} u dz; inv=(2pi)^{-n}; data f=e^{+it|Z|^2} FT(u)"


def dump_field(path, obj, kind: str | None = None):
    """Write a WaveField or SpectralData: one JSON header line, then raw
    little-endian interleaved (real, imag) float64 in row-major order."""
    if kind is None:
        kind = "physical" if isinstance(obj, WaveField) else "spectral"
    header = {
        "n": obj.grid.n,
        "N": obj.grid.N,
        "L": obj.grid.L,
        "time": getattr(obj, "time", None),
        "kind": kind,
        "convention": _CONVENTION_TAG,
    }
    flat = np.ascontiguousarray(obj.values).ravel()
    inter = np.empty(2 * flat.size, dtype="<f8")
    inter[0::2] = flat.real
    inter[1::2] = flat.imag
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("ascii"))
        fh.write(inter.tobytes())


def load_field(path):
    """Inverse of :func:`dump_field`."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        raw = np.frombuffer(fh.read(), dtype="<f8")
    grid = Grid(n=header["n"], N=header["N"], L=header["L"])
    vals = (raw[0::2] + 1j * raw[1::2]).reshape(grid.shape())
    if header["kind"] == "physical":
        return WaveField(grid=grid, values=vals, time=header["time"])
    return SpectralData(grid=grid, values=vals)


def export_spectrum_csv(path, f: SpectralData):
    """CSV of |f(Z)|^2 and arg f(Z) against the dual grid."""
    with open(path, "w", newline="") as fh:
        if f.grid.n == 1:
            fh.write("Z,abs2,arg\n")
            for z, val in zip(f.grid.axis_Z(), f.values):
                fh.write(f"{z:.17g},{abs(val)**2:.17g},{np.angle(val):.17g}\n")
        else:
            fh.write("Z1,Z2,abs2,arg\n")
            ax = f.grid.axis_Z()
            for i, z1 in enumerate(ax):
                for j, z2 in enumerate(ax):
                    val = f.values[i, j]
                    fh.write(f"{z1:.17g},{z2:.17g},{abs(val)**2:.17g},{np.angle(val):.17g}\n")
