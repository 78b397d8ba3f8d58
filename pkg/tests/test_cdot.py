import numpy as np
import pytest

from mgdeform.cdot import (
    PathIntegrator,
    gamma_t,
    kernel_fields,
    lipschitz_ratio,
    loop_closedness,
    solve_cdot,
)
from mgdeform.errors import NearSingularDenominatorError
from mgdeform.gdef import assemble_coefficients
from mgdeform.grid import DiskGrid
from mgdeform.metrics import FlatMetric, conformal_radial_metric
from mgdeform.surface import SphereCapImmersion, build_surface

from helpers import make_coeff_fn, prescribed_deformation, smooth_scalar


@pytest.fixture(scope="module")
def setup_flat():
    grid = DiskGrid(16, 32)
    metric = FlatMetric()
    surf = build_surface(SphereCapImmersion(1.0, 0.8), metric, grid, ci_tol=1e-5)
    return metric, surf, PathIntegrator(grid)


@pytest.fixture(scope="module")
def setup_curved():
    grid = DiskGrid(16, 32)
    metric = conformal_radial_metric(0.6)
    surf = build_surface(SphereCapImmersion(1.0, 0.8), metric, grid, ci_tol=1e-5)
    return metric, surf, PathIntegrator(grid)


def test_gamma_zero_rates(setup_flat):
    _, surf, integ = setup_flat
    zero = np.zeros(surf.grid.n_nodes)
    g = gamma_t(surf, zero, zero, integ)
    assert np.max(np.abs(g)) == 0.0


def test_gamma_closed_form_sphere(setup_flat):
    # a1dot = 1, a2dot = 0: gamma = -int_0^x V dx1 along rays, V known in
    # closed form for the stereographic sphere cap
    _, surf, integ = setup_flat
    grid = surf.grid
    one = np.ones(grid.n_nodes)
    zero = np.zeros(grid.n_nodes)
    g = gamma_t(surf, one, zero, integ)
    rho = 0.8
    r = grid.r
    anti = 4 * rho**2 * (
        r / (2 * (1 + rho**2 * r**2)) + np.arctan(rho * r) / (2 * rho)
    )
    expect = -np.cos(grid.theta) * anti
    expect[0] = 0.0
    assert np.max(np.abs(g - expect)) < 1e-5


def test_gamma_refinement_oracle():
    # errors against a 10x-refined quadrature shrink at ~4th order
    metric = FlatMetric()
    errs = {}
    for n_r in (12, 24, 240):
        grid = DiskGrid(n_r, 24)
        surf = build_surface(SphereCapImmersion(1.0, 0.8), metric, grid, ci_tol=1e-3)
        a1d = np.sin(grid.x1 + 0.3) * np.cos(grid.x2)
        a2d = np.cos(grid.x1) * grid.x2
        g = gamma_t(surf, a1d, a2d, PathIntegrator(grid))
        errs[n_r] = g[grid.boundary_idx]
    e12 = np.max(np.abs(errs[12] - errs[240]))
    e24 = np.max(np.abs(errs[24] - errs[240]))
    assert e24 < e12 / 10.0


def test_flat_kernel_vanishes_and_cdot_is_gamma(setup_flat):
    metric, surf, integ = setup_flat
    grid = surf.grid
    a1dot = smooth_scalar(grid, 1, 1e-2)
    a2dot = smooth_scalar(grid, 2, 1e-2)
    deform = prescribed_deformation(surf, a1dot, a2dot, smooth_scalar(grid, 3, 1e-2), 0.1, 5)
    fn = make_coeff_fn(metric, surf, deform, a1dot, a2dot)
    coeffs = fn(deform.cdot)
    b1, b2 = kernel_fields(surf, coeffs, deform.a1, deform.a2, a1dot, a2dot)
    assert np.max(np.abs(b1)) == 0.0 and np.max(np.abs(b2)) == 0.0
    sol = solve_cdot(surf, fn, deform.a1, deform.a2, a1dot, a2dot, integ)
    assert np.max(np.abs(sol.cdot - sol.gamma)) == 0.0
    assert sol.iterations <= 2
    assert np.max(np.abs(sol.p_field)) == 0.0


def test_zero_rates_zero_cdot(setup_curved):
    metric, surf, integ = setup_curved
    grid = surf.grid
    zero = np.zeros(grid.n_nodes)
    deform = prescribed_deformation(surf, zero, zero, zero, 0.05, 5)
    fn = make_coeff_fn(metric, surf, deform, zero, zero)
    sol = solve_cdot(surf, fn, deform.a1, deform.a2, zero, zero, integ)
    assert np.max(np.abs(sol.cdot)) == 0.0


def contraction_run(metric, surf, integ, t, c0=None, tol=1e-12):
    grid = surf.grid
    a1dot = smooth_scalar(grid, 21, 5e-2)
    a2dot = smooth_scalar(grid, 22, 5e-2)
    cdot0 = smooth_scalar(grid, 23, 5e-2)
    n_steps = 8
    deform = prescribed_deformation(surf, a1dot, a2dot, cdot0, t, n_steps)
    dt = t / n_steps
    prev_state = prescribed_deformation(surf, a1dot, a2dot, cdot0, t - dt, n_steps - 1)
    prev = assemble_coefficients(metric, surf, prev_state)
    fn = make_coeff_fn(metric, surf, deform, a1dot, a2dot, prev=prev, dt=dt)
    return solve_cdot(surf, fn, deform.a1, deform.a2, a1dot, a2dot, integ,
                      tol=tol, c0=c0), (a1dot, a2dot)


def test_contraction_rates_below_one_and_monotone(setup_curved):
    metric, surf, integ = setup_curved
    rates = []
    for t in (0.0125, 0.025, 0.05):
        sol, _ = contraction_run(metric, surf, integ, t)
        assert sol.rate < 1.0
        assert sol.residual < 1e-10
        rates.append(sol.rate)
    assert rates[0] <= rates[1] <= rates[2]


def test_uniqueness_two_initial_iterates(setup_curved):
    metric, surf, integ = setup_curved
    tol = 1e-12
    sol_a, _ = contraction_run(metric, surf, integ, 0.05, tol=tol)
    bump = 0.1 * np.cos(surf.grid.x1)
    sol_b, _ = contraction_run(metric, surf, integ, 0.05, c0=sol_a.gamma + bump, tol=tol)
    assert np.max(np.abs(sol_a.cdot - sol_b.cdot)) <= 2 * tol * max(
        1.0, np.max(np.abs(sol_a.cdot))
    )


def test_cdot_zero_at_base_point(setup_curved):
    metric, surf, integ = setup_curved
    sol, _ = contraction_run(metric, surf, integ, 0.05)
    assert abs(sol.cdot[integ.x0_node]) == 0.0


def test_lipschitz_ratio_flat_and_identical(setup_flat):
    metric, surf, integ = setup_flat
    grid = surf.grid
    a1dot = smooth_scalar(grid, 31, 1e-2)
    a2dot = smooth_scalar(grid, 32, 1e-2)
    deform = prescribed_deformation(surf, a1dot, a2dot, smooth_scalar(grid, 33, 1e-2), 0.1, 5)
    fn = make_coeff_fn(metric, surf, deform, a1dot, a2dot)
    sol1 = solve_cdot(surf, fn, deform.a1, deform.a2, a1dot, a2dot, integ)
    sol2 = solve_cdot(surf, fn, deform.a1, deform.a2, a1dot, a2dot, integ)
    assert lipschitz_ratio(sol1, sol2, (a1dot, a2dot), (a1dot, a2dot)) == 0.0
    assert np.max(np.abs(sol1.p_field)) == 0.0  # flat: P identically zero


def test_lipschitz_ratio_shrinks_with_t(setup_curved):
    metric, surf, integ = setup_curved
    ratios = []
    for t in (0.05, 0.0125):
        sol_a, ra = contraction_run(metric, surf, integ, t)
        grid = surf.grid
        a1b = ra[0] + 0.02 * np.cos(grid.x2)
        a2b = ra[1] - 0.02 * np.sin(grid.x1)
        deform = prescribed_deformation(surf, a1b, a2b, smooth_scalar(grid, 23, 5e-2), t, 8)
        fnb = make_coeff_fn(metric, surf, deform, a1b, a2b)
        sol_b = solve_cdot(surf, fnb, deform.a1, deform.a2, a1b, a2b, integ, tol=1e-12)
        ratios.append(lipschitz_ratio(sol_a, sol_b, ra, (a1b, a2b)))
    assert ratios[1] < ratios[0]


def test_path_independence_for_consistent_state(setup_flat):
    # for rates satisfying the flat constraint the integrand is an exact
    # gradient and the loop diagnostic sits at discretization level
    metric, surf, integ = setup_flat
    grid = surf.grid
    cdot = smooth_scalar(grid, 41, 1e-3)
    dcd = np.stack([grid.ddx1(cdot), grid.ddx2(cdot)], axis=-1)
    a_rates = -np.einsum("nil,ni->nl", np.linalg.inv(surf.b), dcd)
    a1dot, a2dot = a_rates[:, 0], a_rates[:, 1]
    deform = prescribed_deformation(surf, a1dot, a2dot, cdot, 0.05, 5)
    fn = make_coeff_fn(metric, surf, deform, a1dot, a2dot)
    curl = loop_closedness(surf, fn(cdot), deform.a1, deform.a2, a1dot, a2dot)
    assert curl < 1e-6


def test_near_singular_denominator_raises(setup_curved):
    metric, surf, integ = setup_curved
    coeffs = assemble_coefficients(
        metric, surf,
        prescribed_deformation(surf, *(
            [np.zeros(surf.grid.n_nodes)] * 3), 0.01, 2),
    )
    coeffs.n_j[:, 0] = -0.9  # force the denominator down
    with pytest.raises(NearSingularDenominatorError):
        kernel_fields(surf, coeffs, coeffs.n_j[:, 1], coeffs.n_j[:, 2],
                      coeffs.n_j[:, 1], coeffs.n_j[:, 2])
