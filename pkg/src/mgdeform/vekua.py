"""Riemann-Hilbert boundary-value solver for generalized analytic functions.

Solves d_zbar w + A w + B conj(w) + E(w) = Psi on the unit disk with
Re{conj(lambda) w} = phi on the boundary, where E is a path-integral volume
term anchored at a base node.  The areal operator T is the right inverse of
d_zbar; the boundary symbol is reduced to the monomial z^n by factoring a
zero-index unimodular function through a Schwarz-operator extension, after
which the (2n+1)-real-parameter solution family of the core problem is
explicit in polynomial form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractionFailureError,
    ConvergenceError,
    FormatError,
    MgError,
    UnderResolvedError,
    UnsolvableDataError,
)
from .grid import DiskGrid

_KERNEL_CACHE_MAX_RINGS = 160


# --------------------------------------------------------------------------
# T operator
# --------------------------------------------------------------------------

def t_operator_direct(grid: DiskGrid, f, chunk=512):
    """Reference all-pairs evaluation of T(f); used to cross-check the
    convolution path on small grids."""
    f = np.asarray(f, dtype=complex)
    w = grid.area_weights
    zeta = grid.z
    out = np.empty(grid.n_nodes, dtype=complex)
    for lo in range(0, grid.n_nodes, chunk):
        hi = min(lo + chunk, grid.n_nodes)
        dz = zeta[None, :] - zeta[lo:hi, None]
        num = f[None, :] - f[lo:hi, None]
        ker = np.where(dz == 0, 0.0, num / np.where(dz == 0, 1.0, dz))
        out[lo:hi] = ker @ w
    return -out / np.pi + f * np.conj(zeta)


def _ring_kernel_ffts(grid: DiskGrid):
    """FFT of the ring-to-ring interaction kernels, negated-frequency order."""
    if grid._kernel_cache is not None:
        return grid._kernel_cache
    n_r, nt = grid.n_r, grid.n_theta
    radii = grid.r_levels[1:]
    m = np.arange(nt)
    phase = np.exp(1j * m * grid.dtheta)  # e^{i m dtheta}
    ker = np.empty((n_r, n_r, nt), dtype=complex)
    for it, r in enumerate(radii):
        den = radii[:, None] * phase[None, :] - r  # (src_ring, m)
        den[it, 0] = 1.0  # self term excluded below
        kk = 1.0 / den
        kk[it, 0] = 0.0
        ker[it] = kk
    khat = np.fft.fft(ker, axis=2)
    khat_neg = np.concatenate([khat[..., :1], khat[..., :0:-1]], axis=2)
    cache = khat_neg
    if n_r <= _KERNEL_CACHE_MAX_RINGS:
        grid._kernel_cache = cache
    return cache


def _pair_sums(grid: DiskGrid, g):
    """S[g]_p = sum_{q != p} w_q g_q / (zeta_q - z_p) via ring convolutions."""
    n_r, nt = grid.n_r, grid.n_theta
    w_ring = np.array([grid.area_weights[grid.node_index(i, 0)] for i in range(1, n_r + 1)])
    g_rings = g[1:].reshape(n_r, nt)
    khat_neg = _ring_kernel_ffts(grid)
    gw = g_rings * w_ring[:, None]
    ghat = np.fft.fft(gw, axis=1)  # (src_ring, k)
    spec = np.einsum("sk,tsk->tk", ghat, khat_neg)
    ring_sums = np.fft.ifft(spec, axis=1)
    ring_sums *= np.exp(-1j * grid.theta[1:]).reshape(n_r, nt)
    out = np.empty(grid.n_nodes, dtype=complex)
    # ring targets: add the center-source contribution w_0 g_0 / (0 - z_p)
    w0 = grid.area_weights[0]
    out[1:] = ring_sums.reshape(-1) - w0 * g[0] / grid.z[1:]
    # center target: direct row over ring sources
    out[0] = np.sum(grid.area_weights[1:] * g[1:] / grid.z[1:])
    return out


def t_operator_midpoint(grid: DiskGrid, f):
    """Cell-midpoint quadrature of T with singularity subtraction.

    T(f) = T(f - f(z)) + f(z) T(1) with the closed-disk identity
    T(1)(z) = conj(z) applied exactly.  Kept as a cross-check; its accuracy
    degrades to O(h) at the rim, which the mode-wise path does not suffer.
    """
    f = np.asarray(f, dtype=complex)
    s_f = _pair_sums(grid, f)
    s_1 = _pair_sums(grid, np.ones(grid.n_nodes, dtype=complex))
    return -(s_f - f * s_1) / np.pi + f * np.conj(grid.z)


def _t_mode_tables(grid: DiskGrid):
    """Per-interval Gauss points, interpolation weights and power kernels for
    the mode-wise radial Volterra integrals of T."""
    key = "t_mode"
    if key in grid._caches:
        return grid._caches[key]
    n_r, nt = grid.n_r, grid.n_theta
    rs = grid.r_levels  # (n_r + 1,) radii including 0
    gauss_x, gauss_w = np.polynomial.legendre.leggauss(4)
    mid = 0.5 * (rs[:-1] + rs[1:])
    half = 0.5 * (rs[1:] - rs[:-1])
    rho = mid[:, None] + half[:, None] * gauss_x[None, :]      # (n_r, 4)
    wq = half[:, None] * np.tile(gauss_w, (n_r, 1))            # (n_r, 4)
    # cubic interpolation of radial profiles onto the Gauss points
    starts = np.zeros(n_r, dtype=int)
    interp = np.zeros((n_r, 4, 4))
    for i in range(n_r):
        s0 = int(np.clip(i - 1, 0, n_r - 3))
        starts[i] = s0
        xs = rs[s0 : s0 + 4]
        for q in range(4):
            for s in range(4):
                others = np.delete(xs, s)
                interp[i, q, s] = np.prod((rho[i, q] - others) / (xs[s] - others))
    # FFT index -> signed mode
    k = np.arange(nt)
    modes = np.where(k < nt // 2, k, k - nt)
    pos = modes >= 1
    neg = ~pos
    mp = modes[pos]        # m >= 1, backward recurrence
    mn = modes[neg]        # m <= 0, forward recurrence
    with np.errstate(divide="ignore", invalid="ignore"):
        ker_b = np.where(
            (rs[:-1, None, None] == 0.0) & (mp[None, None, :] == 1),
            1.0,
            (rs[:-1, None, None] / rho[:, :, None]) ** (mp[None, None, :] - 1),
        )
        rat_b = np.where(
            (rs[:-1, None] == 0.0) & (mp[None, :] == 1),
            1.0,
            (rs[:-1, None] / rs[1:, None]) ** (mp[None, :] - 1),
        )
    ker_f = (rho[:, :, None] / rs[1:, None, None]) ** (1 - mn[None, None, :])
    rat_f = (rs[:-1, None] / rs[1:, None]) ** (1 - mn[None, :])
    tables = {
        "wq": wq, "starts": starts, "interp": interp, "pos": pos, "neg": neg,
        "mp": mp, "mn": mn, "ker_b": ker_b, "rat_b": rat_b,
        "ker_f": ker_f, "rat_f": rat_f, "modes": modes,
    }
    grid._caches[key] = tables
    return tables


def t_operator(grid: DiskGrid, f):
    """T(f)(z) = -(1/pi) integral of f(zeta)/(zeta - z) over the disk.

    Evaluated mode by mode: on the disk T maps the angular mode m to m - 1
    with an explicit one-dimensional radial integral (from the rim inward
    for m >= 1, from the center outward for m <= 0), integrated at O(h^4)
    with Gauss panels and stable power-ratio kernels.
    """
    f = np.asarray(f, dtype=complex)
    tab = _t_mode_tables(grid)
    n_r, nt = grid.n_r, grid.n_theta
    rings = f[1:].reshape(n_r, nt)
    ghat = np.fft.fft(rings, axis=1) / nt        # (n_r, k) mode amplitudes
    prof = np.zeros((n_r + 1, nt), dtype=complex)
    prof[1:] = ghat
    prof[0, 0] = f[0]                            # center carries mode 0 only
    # interpolate every mode profile onto the Gauss points of each interval
    idx = tab["starts"][:, None] + np.arange(4)[None, :]
    gp = np.einsum("iqs,isk->iqk", tab["interp"], prof[idx])   # (n_r, 4, k)
    wq = tab["wq"]

    out_prof = np.zeros((n_r + 1, nt), dtype=complex)
    # m >= 1: w(r_i) = rat * w(r_{i+1}) - 2 int_{r_i}^{r_{i+1}} g (r_i/rho)^{m-1} drho
    seg_b = -2.0 * np.einsum("iq,iqm->im", wq, gp[:, :, tab["pos"]] * tab["ker_b"])
    w_pos = np.zeros((n_r + 1, seg_b.shape[1]), dtype=complex)
    for i in range(n_r - 1, -1, -1):
        w_pos[i] = tab["rat_b"][i] * w_pos[i + 1] + seg_b[i]
    # m <= 0: w(r_{i+1}) = rat * w(r_i) + 2 int (rho/r_{i+1})^{1-m} g drho
    seg_f = 2.0 * np.einsum("iq,iqm->im", wq, gp[:, :, tab["neg"]] * tab["ker_f"])
    w_neg = np.zeros((n_r + 1, seg_f.shape[1]), dtype=complex)
    for i in range(n_r):
        w_neg[i + 1] = tab["rat_f"][i] * w_neg[i] + seg_f[i]

    # scatter to output modes m - 1 (drop the unrepresentable lowest mode)
    modes = tab["modes"]
    low = -(nt // 2)
    for j, m in enumerate(modes[tab["pos"]]):
        out_prof[:, (m - 1) % nt] += w_pos[:, j]
    for j, m in enumerate(modes[tab["neg"]]):
        if m - 1 < low:
            continue
        out_prof[:, (m - 1) % nt] += w_neg[:, j]

    out = np.empty(grid.n_nodes, dtype=complex)
    out[0] = out_prof[0, 0]
    out[1:] = np.fft.ifft(out_prof[1:] * nt, axis=1).reshape(-1)
    return out


def t_one_oracle(grid: DiskGrid, targets_idx=None, n_phi=4096):
    """High-resolution quadrature oracle for the area integral with f = 1.

    Radial integration is exact, leaving a smooth periodic angle integral
    evaluated by the trapezoid rule:  T(1)(z) = -(1/pi) int e^{-i phi} R dphi
    with R(phi; z) the chord length from z to the rim.
    """
    if targets_idx is None:
        targets_idx = np.arange(grid.n_nodes)
    phi = np.arange(n_phi) * (2 * np.pi / n_phi)
    e = np.exp(1j * phi)
    out = np.empty(len(targets_idx), dtype=complex)
    zs = grid.z[targets_idx]
    chunk = max(1, int(2e6 // n_phi))
    for lo in range(0, len(zs), chunk):
        hi = min(lo + chunk, len(zs))
        z = zs[lo:hi, None]
        beta = np.real(np.conj(z) * e[None, :])
        disc = np.maximum(beta**2 + 1.0 - np.abs(z) ** 2, 0.0)
        radius = -beta + np.sqrt(disc)
        out[lo:hi] = -(np.conj(e)[None, :] * radius).mean(axis=1) * 2 * np.pi / np.pi
    return out


# --------------------------------------------------------------------------
# boundary symbol
# --------------------------------------------------------------------------

def index_of(lam):
    """Winding number of a unimodular boundary symbol."""
    lam = np.asarray(lam, dtype=complex)
    if np.max(np.abs(np.abs(lam) - 1.0)) > 1e-8:
        raise MgError("boundary symbol must be unimodular")
    jumps = np.angle(np.roll(lam, -1) / lam)
    if np.max(np.abs(jumps)) >= np.pi * (1 - 1e-9):
        raise UnderResolvedError(
            "adjacent boundary samples jump by >= pi; refine the boundary ring"
        )
    total = jumps.sum() / (2 * np.pi)
    n = int(np.rint(total))
    if abs(total - n) > 0.1:
        raise UnderResolvedError(f"winding {total} is not close to an integer")
    return n


def holomorphic_field(grid: DiskGrid, coeffs):
    """Evaluate sum_k coeffs[k] z^k on the grid (len(coeffs) <= n_theta)."""
    coeffs = np.asarray(coeffs, dtype=complex)
    nt = grid.n_theta
    if len(coeffs) > nt:
        raise MgError("too many holomorphic coefficients for this grid")
    spec = np.zeros(nt, dtype=complex)
    out = np.empty(grid.n_nodes, dtype=complex)
    out[0] = coeffs[0]
    pows = np.arange(len(coeffs))
    for i in range(1, grid.n_r + 1):
        r = grid.r_levels[i]
        spec[: len(coeffs)] = coeffs * r**pows
        vals = np.fft.ifft(spec * nt)
        out[grid.node_index(i, np.arange(nt))] = vals
    return out


def schwarz_coefficients(boundary_vals, n_theta):
    """Taylor coefficients of the holomorphic extension with given real part
    on the rim and imaginary part vanishing at the origin."""
    c = np.fft.fft(np.asarray(boundary_vals, dtype=float)) / n_theta
    half = n_theta // 2
    coeffs = np.zeros(half + 1, dtype=complex)
    coeffs[0] = c[0].real
    coeffs[1:half] = 2.0 * c[1:half]
    coeffs[half] = c[half].real
    return coeffs


def schwarz_field(grid: DiskGrid, boundary_vals):
    return holomorphic_field(grid, schwarz_coefficients(boundary_vals, grid.n_theta))


@dataclass
class CanonicalSymbol:
    """Reduction lambda = e^{i n theta} e^{i mu} with mu absorbed."""

    grid: DiskGrid
    lam: np.ndarray
    n: int
    exp_is: np.ndarray       # e^{iS} on the grid, S = Schwarz extension of mu
    phi_weight: np.ndarray   # e^{Im S} on the boundary ring
    basis: list              # homogeneous family fields (2n+1 for n >= 0)

    @property
    def family_size(self):
        return len(self.basis)


def canonicalize(grid: DiskGrid, lam) -> CanonicalSymbol:
    lam = np.asarray(lam, dtype=complex)
    if lam.shape != (grid.n_theta,):
        raise MgError("lambda must be sampled on the boundary ring")
    n = index_of(lam)
    lam = lam / np.abs(lam)
    jumps = np.angle(np.roll(lam, -1) / lam)
    arg = np.angle(lam[0]) + np.concatenate([[0.0], np.cumsum(jumps[:-1])])
    mu = arg - n * grid.boundary_theta
    coeffs = schwarz_coefficients(mu, grid.n_theta)
    s_complex = holomorphic_field(grid, coeffs)
    exp_is = np.exp(1j * s_complex)
    phi_weight = np.exp(s_complex[grid.boundary_idx].imag)
    basis = []
    if n >= 0:
        def poly(coefs):
            return holomorphic_field(grid, coefs) * exp_is

        c = np.zeros(2 * n + 1, dtype=complex)
        c[n] = 1j
        basis.append(poly(c))
        for k in range(1, n + 1):
            c = np.zeros(2 * n + 1, dtype=complex)
            c[n + k] = 1.0
            c[n - k] = -1.0
            basis.append(poly(c))
            c = np.zeros(2 * n + 1, dtype=complex)
            c[n + k] = 1j
            c[n - k] = 1j
            basis.append(poly(c))
    return CanonicalSymbol(grid=grid, lam=lam, n=n, exp_is=exp_is,
                           phi_weight=phi_weight, basis=basis)


def _core_particular(sym: CanonicalSymbol, phi_boundary):
    """Particular solution of d_zbar w = 0, Re{conj(lam) w} = phi.

    Returns (field, solvability_residuals); residuals are empty for n >= 0.
    """
    grid = sym.grid
    phi1 = np.asarray(phi_boundary, dtype=float) * sym.phi_weight
    coeffs = schwarz_coefficients(phi1, grid.n_theta)
    if sym.n >= 0:
        shifted = np.zeros(len(coeffs) + sym.n, dtype=complex)
        shifted[sym.n :] = coeffs
        w = holomorphic_field(grid, shifted[: grid.n_theta]) * sym.exp_is
        return w, np.array([])
    m = -sym.n
    res = [coeffs[0].real]
    for k in range(1, min(m, len(coeffs))):
        res.extend([coeffs[k].real, coeffs[k].imag])
    while len(res) < 2 * m - 1:
        res.append(0.0)
    proj = coeffs.copy()
    proj[: min(m, len(proj))] = 0.0
    shifted = proj[m:] if len(proj) > m else np.zeros(1, dtype=complex)
    w = holomorphic_field(grid, shifted) * sym.exp_is
    return w, np.array(res)


@dataclass
class SolutionFamily:
    """Solved boundary-value problem: particular member plus free family."""

    w: np.ndarray
    particular: np.ndarray
    basis: list
    params: np.ndarray
    n: int
    iterations: int = 0
    ratio: float = 0.0
    mode: str = "picard"
    boundary_residual: float = 0.0
    fixed_point_residual: float = 0.0
    pde_residual_fd: float = 0.0
    solvability: np.ndarray = field(default_factory=lambda: np.array([]))
    solvability_count_primary: int = 0

    @property
    def dimension(self):
        return len(self.basis)


def rh_core_solve(grid: DiskGrid, lam, phi, params=None) -> SolutionFamily:
    """Solve d_zbar w = 0 with Re{conj(lam) w} = phi on the rim."""
    sym = canonicalize(grid, lam)
    w_p, resid = _core_particular(sym, phi)
    if params is None:
        params = np.zeros(sym.family_size)
    params = np.asarray(params, dtype=float)
    if len(params) != sym.family_size:
        raise MgError(f"expected {sym.family_size} parameters, got {len(params)}")
    w = w_p.copy()
    for c, b in zip(params, sym.basis):
        w = w + c * b
    bres = float(np.max(np.abs(
        np.real(np.conj(sym.lam) * w[grid.boundary_idx]) - np.asarray(phi)
    )))
    return SolutionFamily(
        w=w, particular=w_p, basis=list(sym.basis), params=params, n=sym.n,
        boundary_residual=bres, solvability=resid,
        solvability_count_primary=1 if sym.n < 0 else 0,
    )


# --------------------------------------------------------------------------
# full problem
# --------------------------------------------------------------------------

@dataclass
class BoundaryProblem:
    """Data of the full generalized-analytic boundary-value problem."""

    grid: DiskGrid
    lam: np.ndarray                 # (n_theta,) unimodular
    phi: np.ndarray                 # (n_theta,) real
    A: np.ndarray | None = None     # (N,) complex coefficient field
    B: np.ndarray | None = None
    e0_point: np.ndarray | None = None   # i q0 / 2 at the field point
    e0_weight: np.ndarray | None = None  # V at the integration point
    e_swap: bool = False            # pair (Im w, Re w) with (dx1, dx2) instead
    psi: np.ndarray | None = None   # fixed right-hand side (file problems)
    x0_node: int = 0

    def e_operator(self, w):
        if self.e0_point is None:
            return np.zeros(self.grid.n_nodes, dtype=complex)
        h1 = np.real(w)
        h2 = np.imag(w)
        if self.e_swap:
            h1, h2 = h2, h1
        weight = self.e0_weight if self.e0_weight is not None else np.ones(self.grid.n_nodes)
        path = self.grid.line_integral_from(self.x0_node, weight * h1, weight * h2)
        return self.e0_point * path

    def volume_terms(self, w):
        out = self.e_operator(w)
        if self.A is not None:
            out = out + self.A * w
        if self.B is not None:
            out = out + self.B * np.conj(w)
        return out


def assemble_AB(p1, p2, qb1, qb2, q0=None, v=None):
    """Coefficient fields of the complex form of the elliptic pair.

    A = (p1 + qb2 + i qb1 - i p2)/4,  B = (p1 - qb2 + i qb1 + i p2)/4;
    the volume kernel splits as (i q0 / 2) at the field point times the
    weight v at the integration point.
    """
    a = 0.25 * (p1 + qb2 + 1j * qb1 - 1j * p2)
    b = 0.25 * (p1 - qb2 + 1j * qb1 + 1j * p2)
    e0_point = None if q0 is None else 0.5j * np.asarray(q0, dtype=float)
    return a, b, e0_point, v


def _gmres(apply_op, rhs, tol, max_iter):
    """Matrix-free GMRES on real vectors, no restarts, deterministic."""
    n = rhs.size
    beta = np.linalg.norm(rhs)
    if beta == 0:
        return np.zeros(n), 0
    q = np.empty((max_iter + 1, n))
    h = np.zeros((max_iter + 1, max_iter))
    q[0] = rhs / beta
    for k in range(max_iter):
        v = apply_op(q[k])
        for j in range(k + 1):
            h[j, k] = q[j] @ v
            v = v - h[j, k] * q[j]
        h[k + 1, k] = np.linalg.norm(v)
        e1 = np.zeros(k + 2)
        e1[0] = beta
        ysol, res, *_ = np.linalg.lstsq(h[: k + 2, : k + 1], e1, rcond=None)
        rnorm = np.linalg.norm(h[: k + 2, : k + 1] @ ysol - e1)
        if rnorm <= tol * beta or h[k + 1, k] < 1e-300:
            return q[: k + 1].T @ ysol, k + 1
        q[k + 1] = v / h[k + 1, k]
    ysol, *_ = np.linalg.lstsq(h[: max_iter + 1, :max_iter],
                               np.concatenate([[beta], np.zeros(max_iter)]), rcond=None)
    return q[:max_iter].T @ ysol, max_iter


def bvp_solve(problem: BoundaryProblem, psi_assembler=None, tol=1e-10,
              max_iter=60, params=None, mode="picard", solvability_tol=1e-6,
              sym: CanonicalSymbol | None = None) -> SolutionFamily:
    """Solve the full problem by alternating areal correction and core solve.

    ``psi_assembler`` maps the current iterate w to the right-hand side field;
    when None the fixed ``problem.psi`` (or zero) is used.  ``mode`` is
    "picard", "gmres", or "auto" (picard with gmres fallback on divergence).
    """
    grid = problem.grid
    if sym is None:
        sym = canonicalize(grid, problem.lam)
    n = sym.n
    if params is None:
        params = np.zeros(sym.family_size)
    params = np.asarray(params, dtype=float)

    if psi_assembler is None:
        psi_fixed = problem.psi if problem.psi is not None else np.zeros(grid.n_nodes, complex)
        psi_assembler = lambda w: psi_fixed
        psi_is_fixed = True
    else:
        psi_is_fixed = False

    bidx = grid.boundary_idx
    lam = sym.lam
    solv_hist = []

    def corrected_t(field_on_disk, phi_target):
        u = t_operator(grid, field_on_disk)
        corr, resid = _core_particular(
            sym, phi_target - np.real(np.conj(lam) * u[bidx])
        )
        return u + corr, resid

    def data_term(psi_field, c):
        u, resid = corrected_t(psi_field, np.asarray(problem.phi, dtype=float))
        for ci, b in zip(c, sym.basis):
            u = u + ci * b
        return u, resid

    def linear_response(w):
        vol = problem.volume_terms(w)
        u, _ = corrected_t(-vol, np.zeros(grid.n_theta))
        return u

    def pack(w):
        return np.concatenate([w.real, w.imag])

    def unpack(v):
        half = v.size // 2
        return v[:half] + 1j * v[half:]

    w = np.zeros(grid.n_nodes, dtype=complex)
    iterations = 0
    ratio = 0.0
    used_mode = "picard"

    def inner_picard(rhs):
        """Successive substitution for v = rhs + L(v), frozen right side."""
        nonlocal iterations, ratio
        v = rhs.copy()
        diffs = []
        for k in range(max_iter):
            v_new = rhs + linear_response(v)
            d = float(np.max(np.abs(v_new - v)))
            diffs.append(d)
            v = v_new
            iterations += 1
            if d <= 0.5 * tol * max(1.0, float(np.max(np.abs(v)))):
                break
            if (len(diffs) >= 4 and diffs[-1] > diffs[-2] > diffs[-3]
                    and diffs[-1] > 10 * diffs[0]):
                if mode == "picard":
                    raise ContractionFailureError(
                        "successive approximations diverged (spectral radius >= 1)"
                    )
                return None
        else:
            if mode == "picard":
                raise ConvergenceError(
                    f"no convergence in {max_iter} successive approximations"
                )
            return None
        if len(diffs) >= 2 and diffs[-2] > 0:
            ratio = diffs[-1] / diffs[-2]
        return v

    def inner_gmres(rhs):
        nonlocal iterations, used_mode
        used_mode = "gmres"

        def apply_m(vec):
            ww = unpack(vec)
            return pack(ww - linear_response(ww))

        sol, its = _gmres(apply_m, pack(rhs), 0.1 * tol, max_iter * 4)
        iterations += its
        return unpack(sol)

    # The right-hand side may depend on first derivatives of the iterate, so
    # the outer substitution loses smoothness order per pass: smooth
    # components contract while near-Nyquist noise seeded by roundoff can
    # grow.  Track the minimum successive difference and accept the best
    # iterate once the differences stop shrinking.
    max_outer = 1 if psi_is_fixed else 16
    accept_floor = 1e-3
    prev_d = np.inf
    best_d = np.inf
    best_w = w
    scale0 = None
    for outer in range(max_outer):
        if scale0 is not None and float(np.max(np.abs(w))) > 10.0 * scale0:
            if best_d <= accept_floor * scale0:
                w = best_w
                break
            raise ConvergenceError("right-hand-side coupling amplified the iterate")
        rhs_field, resid = data_term(psi_assembler(w), params)
        solv_hist = resid
        w_new = None
        if mode in ("picard", "auto") and used_mode == "picard":
            w_new = inner_picard(rhs_field)
        if w_new is None:
            w_new = inner_gmres(rhs_field)
        d = float(np.max(np.abs(w_new - w)))
        scale = max(1.0, float(np.max(np.abs(w_new))))
        if scale0 is None:
            scale0 = scale
        if d < best_d:
            best_d = d
            best_w = w_new
        if psi_is_fixed or d <= tol * scale:
            w = w_new
            break
        if d >= 0.9 * prev_d and outer > 0:
            if best_d <= accept_floor * scale:
                w = best_w
                break
            raise ConvergenceError(
                "right-hand-side coupling stopped contracting "
                f"(best step {best_d:.3e} after {outer + 1} passes)"
            )
        w = w_new
        prev_d = d
    else:
        if best_d > accept_floor * max(1.0, scale0 or 1.0):
            raise ConvergenceError("outer right-hand-side iteration did not settle")
        w = best_w

    psi_final = psi_assembler(w)
    if n < 0 and len(solv_hist):
        data_scale = max(
            float(np.max(np.abs(problem.phi))),
            float(np.max(np.abs(psi_final))),
            1e-30,
        )
        if np.max(np.abs(solv_hist)) > solvability_tol * data_scale:
            raise UnsolvableDataError(
                f"negative index {n}: solvability residuals "
                f"{np.max(np.abs(solv_hist)):.3e} exceed tolerance"
            )

    fp_field, _ = data_term(psi_final, params)
    fp_field = fp_field + linear_response(w)
    fixed_point_residual = float(np.max(np.abs(fp_field - w)))
    boundary_residual = float(np.max(np.abs(
        np.real(np.conj(lam) * w[bidx]) - problem.phi
    )))
    pde = grid.dz_bar(w) + problem.volume_terms(w) - psi_final
    return SolutionFamily(
        w=w, particular=w, basis=list(sym.basis), params=params, n=n,
        iterations=iterations, ratio=ratio, mode=used_mode,
        boundary_residual=boundary_residual,
        fixed_point_residual=fixed_point_residual,
        pde_residual_fd=float(np.max(np.abs(pde))),
        solvability=np.asarray(solv_hist),
        solvability_count_primary=1 if n < 0 else 0,
    )


def solve_family(problem: BoundaryProblem, psi_assembler=None, tol=1e-10,
                 max_iter=60, mode="auto", sym=None):
    """Particular solution plus measured homogeneous basis of the family."""
    if sym is None:
        sym = canonicalize(problem.grid, problem.lam)
    base = bvp_solve(problem, psi_assembler, tol, max_iter,
                     params=np.zeros(sym.family_size), mode=mode, sym=sym)
    basis = []
    for i in range(sym.family_size):
        e = np.zeros(sym.family_size)
        e[i] = 1.0
        fam = bvp_solve(problem, psi_assembler, tol, max_iter, params=e,
                        mode=base.mode if base.mode == "gmres" else mode, sym=sym)
        basis.append(fam.w - base.w)
    base.basis = basis
    return base, sym


def homogeneous_rank(grid: DiskGrid, lam, degree=None, threshold=1e-6):
    """Numerical nullity of the boundary condition over holomorphic
    polynomials, with the singular-value gap across the rank cut."""
    lam = np.asarray(lam, dtype=complex)
    n = index_of(lam)
    if degree is None:
        degree = 2 * max(n, 0) + 4
    zb = np.exp(1j * grid.boundary_theta)
    cols = []
    for k in range(degree + 1):
        for unit in (1.0, 1j):
            cols.append(np.real(np.conj(lam) * unit * zb**k))
    m = np.stack(cols, axis=1)
    sv = np.linalg.svd(m, compute_uv=False)
    small = sv < threshold * sv[0]
    nullity = int(np.sum(small)) + max(0, m.shape[1] - m.shape[0])
    kept = sv[~small]
    dropped = sv[small]
    gap = float(kept[-1] / dropped[0]) if len(dropped) and len(kept) else np.inf
    return nullity, gap


def boundary_data(surface, l_field, gamma_dot):
    """Boundary symbol and right-hand side from a tangent field on the rim.

    ``l_field`` holds the tangential components l^i at the boundary nodes;
    lambda_tilde_k = a(y_,k, l^i y_,i) = g_ki l^i.  The symbol is rescaled to
    unit modulus with phi rescaled consistently, so Re{conj(lambda) w} = phi
    encodes a(z_dot, v) = gamma_dot exactly.
    """
    from .errors import BoundaryDegeneracyError

    bidx = surface.grid.boundary_idx
    g = surface.g[bidx]
    l_field = np.asarray(l_field, dtype=float)
    lam_tilde = np.einsum("nki,ni->nk", g, l_field)
    den = lam_tilde[:, 0] ** 2 + lam_tilde[:, 1] ** 2
    if np.min(den) < 1e-14:
        raise BoundaryDegeneracyError(
            "tangent field degenerates against the surface on the rim"
        )
    lam_k = lam_tilde / den[:, None]
    phi = np.asarray(gamma_dot, dtype=float) / den
    lam = lam_k[:, 0] + 1j * lam_k[:, 1]
    scale = np.abs(lam)
    return lam / scale, phi / scale, lam_tilde


def adjoint_null_functionals(grid: DiskGrid, lam, sym=None):
    """Rows of the boundary-data -> solvability-residual map for n < 0.

    Realizes the orthogonality conditions as discrete functionals on the
    boundary samples (the adjoint null basis of the solution operator).
    """
    if sym is None:
        sym = canonicalize(grid, lam)
    if sym.n >= 0:
        return np.zeros((0, grid.n_theta))
    m = -sym.n
    rows = np.empty((2 * m - 1, grid.n_theta))
    for j in range(grid.n_theta):
        e = np.zeros(grid.n_theta)
        e[j] = 1.0
        _, resid = _core_particular(sym, e)
        rows[:, j] = resid
    return rows


# --------------------------------------------------------------------------
# problem files
# --------------------------------------------------------------------------

def _fmt(x):
    return f"{x:.17g}"


def save_problem(path, problem: BoundaryProblem):
    grid = problem.grid
    lines = ["# mgdeform vekua problem v1",
             f"n_r {grid.n_r}",
             f"n_theta {grid.n_theta}",
             f"x0_node {problem.x0_node}",
             f"e_swap {int(problem.e_swap)}"]

    def emit_complex(name, arr):
        lines.append(f"begin {name}")
        for v in arr:
            lines.append(f"{_fmt(v.real)} {_fmt(v.imag)}")
        lines.append("end")

    def emit_real(name, arr):
        lines.append(f"begin {name}")
        for v in arr:
            lines.append(_fmt(float(v)))
        lines.append("end")

    emit_complex("lambda", problem.lam)
    emit_real("phi", problem.phi)
    if problem.A is not None:
        emit_complex("A", problem.A)
    if problem.B is not None:
        emit_complex("B", problem.B)
    if problem.e0_point is not None:
        emit_complex("e0_point", problem.e0_point)
        emit_real("e0_weight", problem.e0_weight)
    if problem.psi is not None:
        emit_complex("psi", problem.psi)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_problem(path) -> BoundaryProblem:
    with open(path) as fh:
        raw = [ln.strip() for ln in fh]
    raw = [ln for ln in raw if ln and not ln.startswith("#")]
    if not raw:
        raise FormatError(f"{path}: empty problem file")
    header = {}
    i = 0
    while i < len(raw) and not raw[i].startswith("begin "):
        parts = raw[i].split()
        if len(parts) != 2:
            raise FormatError(f"{path}: bad header line {raw[i]!r}")
        header[parts[0]] = parts[1]
        i += 1
    try:
        n_r = int(header["n_r"])
        n_theta = int(header["n_theta"])
    except KeyError as exc:
        raise FormatError(f"{path}: missing header key {exc}") from exc
    grid = DiskGrid(n_r, n_theta)
    blocks = {}
    while i < len(raw):
        if not raw[i].startswith("begin "):
            raise FormatError(f"{path}: expected 'begin', got {raw[i]!r}")
        name = raw[i].split(None, 1)[1]
        i += 1
        rows = []
        while i < len(raw) and raw[i] != "end":
            rows.append(raw[i].split())
            i += 1
        if i == len(raw):
            raise FormatError(f"{path}: unterminated block {name!r}")
        i += 1
        blocks[name] = rows

    def as_complex(name, count):
        rows = blocks[name]
        if len(rows) != count or any(len(r) != 2 for r in rows):
            raise FormatError(f"{path}: block {name!r} must have {count} 're im' rows")
        arr = np.array([[float(a), float(b)] for a, b in rows])
        return arr[:, 0] + 1j * arr[:, 1]

    def as_real(name, count):
        rows = blocks[name]
        if len(rows) != count or any(len(r) != 1 for r in rows):
            raise FormatError(f"{path}: block {name!r} must have {count} value rows")
        return np.array([float(r[0]) for r in rows])

    if "lambda" not in blocks or "phi" not in blocks:
        raise FormatError(f"{path}: lambda and phi blocks are required")
    prob = BoundaryProblem(
        grid=grid,
        lam=as_complex("lambda", n_theta),
        phi=as_real("phi", n_theta),
        A=as_complex("A", grid.n_nodes) if "A" in blocks else None,
        B=as_complex("B", grid.n_nodes) if "B" in blocks else None,
        e0_point=as_complex("e0_point", grid.n_nodes) if "e0_point" in blocks else None,
        e0_weight=as_real("e0_weight", grid.n_nodes) if "e0_weight" in blocks else None,
        psi=as_complex("psi", grid.n_nodes) if "psi" in blocks else None,
        x0_node=int(header.get("x0_node", 0)),
        e_swap=bool(int(header.get("e_swap", 0))),
    )
    return prob


def save_solution(path, family: SolutionFamily):
    lines = ["# mgdeform vekua solution v1",
             f"n {family.n}",
             f"dimension {family.dimension}",
             f"iterations {family.iterations}",
             f"mode {family.mode}",
             f"ratio {_fmt(family.ratio)}",
             f"boundary_residual {_fmt(family.boundary_residual)}",
             f"fixed_point_residual {_fmt(family.fixed_point_residual)}"]
    if len(family.solvability):
        lines.append("solvability " + " ".join(_fmt(v) for v in family.solvability))
    lines.append("begin w")
    for v in family.w:
        lines.append(f"{_fmt(v.real)} {_fmt(v.imag)}")
    lines.append("end")
    for k, b in enumerate(family.basis):
        lines.append(f"begin basis_{k}")
        for v in b:
            lines.append(f"{_fmt(v.real)} {_fmt(v.imag)}")
        lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
