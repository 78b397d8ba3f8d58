"""Shared builders for deformation-state fixtures."""

import numpy as np

from mgdeform.gdef import DeformationState, assemble_coefficients
from mgdeform.transport import TransportHistory


def prescribed_deformation(surface, a1dot, a2dot, cdot, t, n_steps):
    """State reached by integrating constant rates up to time t."""
    n = surface.grid.n_nodes
    taus = np.linspace(0.0, t, n_steps + 1)
    zdot = (
        a1dot[:, None] * surface.y1
        + a2dot[:, None] * surface.y2
        + cdot[:, None] * surface.n
    )
    z = np.stack([tau * zdot for tau in taus])
    zd = np.stack([zdot.copy() for _ in taus])
    hist = TransportHistory(taus, z, zd)
    return DeformationState(
        surface=surface,
        a1=t * a1dot, a2=t * a2dot, c=t * cdot,
        a1dot=a1dot.copy(), a2dot=a2dot.copy(), cdot=cdot.copy(),
        history=hist, t=t,
    )


def state_at(surface, a1dot, a2dot, cdot, tau, t, n_steps):
    """Same prescribed flow truncated at an earlier time tau <= t."""
    m = int(round(tau / (t / n_steps)))
    return prescribed_deformation(surface, a1dot, a2dot, cdot, tau, max(m, 1))


def make_coeff_fn(metric, surface, deform, a1dot, a2dot, prev=None, dt=None):
    """Coefficient assembler that feeds the cdot iterate into the history."""

    def fn(cdot_iter):
        hist = deform.history_with_rates(a1dot, a2dot, cdot_iter)
        return assemble_coefficients(
            metric, surface, deform, history=hist, prev=prev, dt=dt
        )

    return fn


def smooth_scalar(grid, seed=0, amp=1.0):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=5)
    x, y = grid.x1, grid.x2
    return amp * (
        c[0]
        + c[1] * x
        + c[2] * y
        + c[3] * np.sin(1.5 * x) * np.cos(y)
        + c[4] * x * y
    )


def manufactured_problem(grid, n=1, with_e=True, amp=0.3, swap=False):
    """Full boundary-value problem with a known smooth solution."""
    from mgdeform.vekua import BoundaryProblem

    th = grid.boundary_theta
    lam = np.exp(1j * n * th)
    z = grid.z
    a_field = amp * (0.5 + 0.3 * z**2)
    b_field = amp * (0.2 - 0.4j * np.conj(z))
    w_star = z**2 * np.conj(z) + 0.4 * np.exp(z)  # d_zbar = z^2, closed form
    if with_e:
        q0 = 0.8 + 0.2 * grid.x1
        vv = 1.0 + 0.3 * grid.x2**2
        e0_point = 0.5j * q0
    else:
        e0_point = None
        vv = None
    prob = BoundaryProblem(
        grid=grid, lam=lam, phi=np.zeros(grid.n_theta), A=a_field, B=b_field,
        e0_point=e0_point, e0_weight=vv, e_swap=swap,
    )
    psi = z**2 + a_field * w_star + b_field * np.conj(w_star) + prob.e_operator(w_star)
    prob.psi = psi
    prob.phi = np.real(np.conj(lam) * w_star[grid.boundary_idx])
    return prob, w_star
