"""Reconstruction of the normal rate from the tangential rates.

Integrating the rate form of the tangential system along admissible curves
from the fixed base point turns it into a fixed-point problem
cdot = L(cdot) + gamma with gamma the plain -V adot line integral and L a
path integral whose kernel carries the N/Q coefficient rates.  The kernel
feeds back on cdot only through the final history sample, which keeps the
iteration contractive for small times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, NearSingularDenominatorError, NoContractionError
from .gdef import GDefCoefficients
from .grid import DiskGrid
from .surface import SurfaceState


@dataclass
class PathIntegrator:
    """Straight segments from the base node; the center base point rides the
    grid rays exactly."""

    grid: DiskGrid
    x0_node: int = 0

    def line_integral(self, p, q):
        return self.grid.line_integral_from(self.x0_node, p, q)


def gamma_t(surface: SurfaceState, a1dot, a2dot, integrator: PathIntegrator):
    """gamma(x) = integral of -V (a1dot dx1 + a2dot dx2) from the base point."""
    v = surface.V
    return integrator.line_integral(-v * a1dot, -v * a2dot)


def kernel_fields(surface: SurfaceState, coeffs: GDefCoefficients,
                  a1, a2, a1dot, a2dot):
    """The two bracketed kernel components (one per differential)."""
    grid = surface.grid
    n0 = coeffs.n_j[:, 0]
    den = 1.0 + n0
    if np.min(np.abs(den)) <= 0.5:
        raise NearSingularDenominatorError(
            "1 + N0 dropped below 0.5; outside the contraction regime"
        )
    v = surface.V
    nk = coeffs.n_j[:, 1:]          # (N, 2)
    ndot_k = coeffs.ndot[:, 1:]
    ndot_0 = coeffs.ndot[:, 0]
    da = np.stack([np.stack([grid.ddx1(a1), grid.ddx2(a1)], axis=-1),
                   np.stack([grid.ddx1(a2), grid.ddx2(a2)], axis=-1)], axis=1)
    dadot = np.stack([np.stack([grid.ddx1(a1dot), grid.ddx2(a1dot)], axis=-1),
                      np.stack([grid.ddx1(a2dot), grid.ddx2(a2dot)], axis=-1)], axis=1)
    adot = np.stack([a1dot, a2dot], axis=-1)
    a_vec = np.stack([a1, a2], axis=-1)
    out = np.empty((grid.n_nodes, 2))
    for i in range(2):
        numer = (
            -v * adot[:, i] * n0
            + np.einsum("nk,nk->n", nk, dadot[:, :, i])
            + np.einsum("nk,nk->n", ndot_k, da[:, :, i])
            + coeffs.qdot[:, i]
        )
        stat = (
            v * a_vec[:, i]
            + np.einsum("nk,nk->n", nk, da[:, :, i])
            + coeffs.q_i[:, i]
        )
        out[:, i] = -numer / den + ndot_0 * stat / den**2
    return out[:, 0], out[:, 1]


@dataclass
class CdotSolution:
    cdot: np.ndarray
    gamma: np.ndarray
    iterations: int
    rate: float            # observed contraction ratio K3
    residual: float        # sup |cdot - L(cdot) - gamma|
    coeffs: GDefCoefficients

    @property
    def p_field(self):
        """The Lipschitz remainder P = cdot - gamma."""
        return self.cdot - self.gamma


def solve_cdot(surface: SurfaceState, coeff_fn, a1, a2, a1dot, a2dot,
               integrator: PathIntegrator, tol=1e-10, max_iter=50,
               c0=None) -> CdotSolution:
    """Successive approximations for cdot = L(cdot) + gamma.

    ``coeff_fn(cdot_iterate)`` must return coefficient fields whose rates
    reflect the iterate through the final history sample.
    """
    gamma = gamma_t(surface, a1dot, a2dot, integrator)
    cdot = gamma.copy() if c0 is None else np.asarray(c0, dtype=float).copy()
    diffs = []
    coeffs = None
    for k in range(max_iter):
        coeffs = coeff_fn(cdot)
        b1, b2 = kernel_fields(surface, coeffs, a1, a2, a1dot, a2dot)
        cdot_new = integrator.line_integral(b1, b2) + gamma
        d = float(np.max(np.abs(cdot_new - cdot)))
        diffs.append(d)
        cdot = cdot_new
        scale = max(1.0, float(np.max(np.abs(cdot))))
        if d <= tol * scale:
            break
    else:
        rate = diffs[-1] / diffs[-2] if len(diffs) > 1 and diffs[-2] > 0 else np.inf
        if rate >= 1.0:
            raise NoContractionError(
                f"cdot iteration expands (ratio {rate:.3f}); reduce the time step"
            )
        raise ConvergenceError(f"cdot iteration did not settle in {max_iter} sweeps")
    rate = 0.0
    for i in range(1, len(diffs)):
        if diffs[i - 1] > 1e-300 and diffs[i] > 0:
            rate = max(rate, diffs[i] / diffs[i - 1])
    coeffs = coeff_fn(cdot)
    b1, b2 = kernel_fields(surface, coeffs, a1, a2, a1dot, a2dot)
    residual = float(np.max(np.abs(cdot - integrator.line_integral(b1, b2) - gamma)))
    return CdotSolution(cdot=cdot, gamma=gamma, iterations=len(diffs),
                        rate=rate, residual=residual, coeffs=coeffs)


def lipschitz_ratio(sol_a: CdotSolution, sol_b: CdotSolution,
                    rates_a, rates_b):
    """Diagnostic ||P_a - P_b|| / (||da1|| + ||da2||); 0/0 reports 0."""
    num = float(np.max(np.abs(sol_a.p_field - sol_b.p_field)))
    den = float(np.max(np.abs(rates_a[0] - rates_b[0]))) + float(
        np.max(np.abs(rates_a[1] - rates_b[1]))
    )
    if den == 0.0:
        return 0.0
    return num / den


def loop_closedness(surface: SurfaceState, coeffs, a1, a2, a1dot, a2dot):
    """Curl of the converged integrand over the grid (path-independence
    diagnostic: the one-form must be closed up to discretization error)."""
    grid = surface.grid
    b1, b2 = kernel_fields(surface, coeffs, a1, a2, a1dot, a2dot)
    v = surface.V
    p = b1 - v * a1dot
    q = b2 - v * a2dot
    return float(np.max(np.abs(grid.ddx1(q) - grid.ddx2(p))))
