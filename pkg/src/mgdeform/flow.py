"""Time-stepping driver for the curvature-preserving deformation.

Each step solves the boundary-value problem for the tangential rates
(complex field w-dot on the relabeled disk), reconstructs the normal rate
from the base-point line integrals, projects the free parameters onto the
point-fixing condition, and advances the state by explicit Euler while
monitoring every defining property: curvature defect (formula and rebuild
oracle), normal-transport residual, boundary condition, fixed point, and
the family dimension.

Coordinate bookkeeping: the elliptic pair takes the d_zbar form only after
swapping the two disk coordinates.  The swap is realized as the exact node
permutation theta -> pi/2 - theta (requires n_theta divisible by 4); all
fields entering the complex solver are permuted, and the solved rates are
permuted back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cdot import PathIntegrator, solve_cdot
from .errors import (
    ContractionFailureError,
    ConvergenceError,
    MgError,
    NoContractionError,
)
from .gdef import (
    DeformationState,
    assemble_coefficients,
    gdef_normal_residual,
    new_deformation,
)
from .kpres import (
    assemble_rates,
    assemble_variation,
    equation_coefficients,
    rhs_psi,
)
from .surface import SurfaceState, gauss_curvature_of
from .transport import TransportHistory
from .vekua import (
    BoundaryProblem,
    assemble_AB,
    boundary_data,
    bvp_solve,
    canonicalize,
    solve_family,
)


# -- boundary plug-ins --------------------------------------------------------

@dataclass
class BoundarySpec:
    """Tangent field and boundary rate data along the rim."""

    tangent_kind: str = "winding"
    winding: int = 1
    phase: float = 0.0
    gamma_kind: str = "harmonic"
    epsilon: float = 1e-3
    mode: int = 1
    gamma_phase: float = 0.0

    def l_field(self, theta):
        if self.tangent_kind == "winding":
            ang = -self.winding * theta + self.phase
            return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        if self.tangent_kind == "first_tangent":
            out = np.zeros((len(theta), 2))
            out[:, 0] = 1.0
            return out
        raise MgError(f"unknown tangent kind {self.tangent_kind!r}")

    def gamma_dot(self, theta, t):
        if self.gamma_kind == "zero":
            return np.zeros_like(theta)
        if self.gamma_kind == "harmonic":
            return self.epsilon * np.cos(self.mode * theta + self.gamma_phase)
        raise MgError(f"unknown gamma kind {self.gamma_kind!r}")

    def gamma(self, theta, t):
        # the shipped rate plug-ins are steady, so the primitive is t * rate
        return t * self.gamma_dot(theta, 0.0)


@dataclass
class FlowConfig:
    t_final: float = 0.05
    dt: float = 0.0025
    k_max: int = 4
    tol_bvp: float = 1e-10
    tol_cdot: float = 1e-10
    max_iter_bvp: int = 60
    max_iter_cdot: int = 50
    parameter_policy: str = "least_norm"   # or "fixed"
    fixed_params: tuple = ()
    x0_node: int = 0
    bvp_mode: str = "auto"
    substeps: int = 1
    check_every: int = 1                   # rebuild-oracle cadence
    tol_K: float = 1e-4
    tol_G: float = 1e-6
    tol_B: float = 1e-6
    capture_fields: bool = False           # stash per-node fields in records

    def validate(self):
        if self.dt <= 0 or self.t_final <= 0:
            raise MgError("dt and t_final must be positive")
        if self.parameter_policy not in ("least_norm", "fixed"):
            raise MgError(f"unknown parameter policy {self.parameter_policy!r}")


@dataclass
class ProjectionResult:
    params: np.ndarray
    dimension_before: int
    dimension_after: int
    rank: int
    point_residual: float


def project_parameters(family, x0_node):
    """Impose w(x0) = 0 on the affine family; least-norm representative."""
    nb = len(family.basis)
    if nb == 0:
        val = family.w[x0_node]
        return ProjectionResult(
            params=np.zeros(0), dimension_before=0, dimension_after=0,
            rank=0, point_residual=float(abs(val)),
        )
    mat = np.empty((2, nb))
    for i, b in enumerate(family.basis):
        mat[0, i] = b[x0_node].real
        mat[1, i] = b[x0_node].imag
    rhs = -np.array([family.w[x0_node].real, family.w[x0_node].imag])
    params, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
    rank = int(np.linalg.matrix_rank(mat, tol=1e-12 * max(1.0, np.abs(mat).max())))
    resid = float(np.linalg.norm(mat @ params - rhs))
    return ProjectionResult(
        params=params, dimension_before=nb, dimension_after=nb - rank,
        rank=rank, point_residual=resid,
    )


# -- per-step bookkeeping ------------------------------------------------------

@dataclass
class PrevRecords:
    coeffs: object = None      # GDefCoefficients at the previous step
    m4: np.ndarray | None = None
    psi1: np.ndarray | None = None
    dt: float | None = None


@dataclass
class FlowStatics:
    eq: object
    a_field: np.ndarray
    b_field: np.ndarray
    e0_point: np.ndarray
    e0_weight: np.ndarray
    lam: np.ndarray
    sym: object
    n: int
    perm: np.ndarray
    ring_perm: np.ndarray
    integ: PathIntegrator
    x0_vek: int


@dataclass
class StepRecord:
    step: int
    t_new: float
    n: int
    dk_max_rel: float
    dk_oracle_rel: float
    g_residual: float
    boundary_residual: float
    fixed_point_z: float
    bvp_iterations: int
    bvp_ratio: float
    bvp_mode: str
    bvp_fixed_point_residual: float
    cdot_iterations: int
    cdot_rate: float
    cdot_residual: float
    family_dimension_before: int
    family_dimension_after: int
    params: list
    rate_sup: float
    step_displacement: float
    fields: dict | None = None

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__
                if k != "fields"}


@dataclass
class FlowState:
    metric: object
    surface: SurfaceState
    deform: DeformationState
    boundary: BoundarySpec
    config: FlowConfig
    t: float = 0.0
    step_index: int = 0
    prev: PrevRecords = field(default_factory=PrevRecords)
    statics: FlowStatics | None = None
    records: list = field(default_factory=list)


def init_flow(metric, surface, boundary, config) -> FlowState:
    config.validate()
    return FlowState(metric=metric, surface=surface, deform=new_deformation(surface),
                     boundary=boundary, config=config)


def _ring_perm(grid):
    quarter = grid.n_theta // 4
    j = np.arange(grid.n_theta)
    return (quarter - j) % grid.n_theta


def _build_statics(state: FlowState) -> FlowStatics:
    surface, grid = state.surface, state.surface.grid
    perm = grid.reflection_permutation()
    ring_perm = _ring_perm(grid)
    eq = equation_coefficients(surface)
    a_field, b_field, e0_point, e0_weight = assemble_AB(
        grid.reflect(eq.p1), grid.reflect(eq.p2),
        grid.reflect(eq.qb1), grid.reflect(eq.qb2),
        q0=grid.reflect(eq.qb0), v=grid.reflect(surface.V),
    )
    theta = grid.boundary_theta
    l_field = state.boundary.l_field(theta)
    gdot0 = state.boundary.gamma_dot(theta, 0.0)
    lam_s, _, _ = boundary_data(surface, l_field, gdot0)
    lam = lam_s[ring_perm]
    sym = canonicalize(grid, lam)
    x0_vek = int(perm[state.config.x0_node])
    return FlowStatics(
        eq=eq, a_field=a_field, b_field=b_field, e0_point=e0_point,
        e0_weight=e0_weight, lam=lam, sym=sym, n=sym.n, perm=perm,
        ring_perm=ring_perm, integ=PathIntegrator(grid, state.config.x0_node),
        x0_vek=x0_vek,
    )


def _phi_for(state: FlowState, t):
    surface = state.surface
    theta = surface.grid.boundary_theta
    l_field = state.boundary.l_field(theta)
    gdot = state.boundary.gamma_dot(theta, t)
    _, phi_s, _ = boundary_data(surface, l_field, gdot)
    return phi_s[state.statics.ring_perm]


def _make_assembler(state: FlowState):
    """psi-dot assembler closure over the current state; caches the pieces
    of its most recent evaluation for the advance step."""
    metric, surface = state.metric, state.surface
    grid = surface.grid
    st = state.statics
    deform = state.deform
    prev = state.prev
    cfg = state.config
    cache = {}

    def coeff_fn_for(a1dot, a2dot):
        def coeff_fn(cdot_iter):
            hist = deform.history_with_rates(a1dot, a2dot, cdot_iter)
            return assemble_coefficients(
                metric, surface, deform, history=hist,
                prev=prev.coeffs, dt=prev.dt, substeps=cfg.substeps,
            )
        return coeff_fn

    def assembler(w_vek):
        a1dot = grid.reflect(np.real(w_vek))
        a2dot = grid.reflect(np.imag(w_vek))
        sol = solve_cdot(
            surface, coeff_fn_for(a1dot, a2dot), deform.a1, deform.a2,
            a1dot, a2dot, st.integ, tol=cfg.tol_cdot, max_iter=cfg.max_iter_cdot,
        )
        hist = deform.history_with_rates(a1dot, a2dot, sol.cdot)
        gvar, bvar, fwd = assemble_variation(
            metric, surface, deform, history=hist, substeps=cfg.substeps
        )
        zdot = deform.rate_displacement(a1dot, a2dot, sol.cdot)
        m4dot_override = None
        if prev.m4 is None:
            # first step: no stored history yet, so the M4 rate comes from a
            # virtual forward state advanced with the current iterate rates;
            # the rate map is linear at the zero state, so the virtual step is
            # clamped to keep the displaced geometry admissible for any iterate
            rate_scale = max(1.0, float(np.max(np.abs(zdot))))
            delta = min(cfg.dt, 1e-3 / rate_scale)
            z_v = deform.displacement(
                deform.a1 + delta * a1dot,
                deform.a2 + delta * a2dot,
                deform.c + delta * sol.cdot,
            )
            tau_v = np.concatenate([hist.tau, [hist.tau[-1] + delta]])
            hist_v = TransportHistory(
                tau_v,
                np.concatenate([hist.z, z_v[None]], axis=0),
                np.concatenate([hist.zdot, zdot[None]], axis=0),
            )
            deform_v = DeformationState(
                surface=surface,
                a1=deform.a1 + delta * a1dot, a2=deform.a2 + delta * a2dot,
                c=deform.c + delta * sol.cdot,
                a1dot=a1dot, a2dot=a2dot, cdot=sol.cdot,
                history=hist_v, t=deform.t + delta,
            )
            _, bvar_v, _ = assemble_variation(
                metric, surface, deform_v, substeps=cfg.substeps
            )
            m4dot_override = (bvar_v.m4 - bvar.m4) / delta
        rates = assemble_rates(
            metric, surface, deform, gvar, bvar, zdot, a1dot, a2dot,
            prev_m4=prev.m4, dt=prev.dt, m4dot_override=m4dot_override,
        )
        psi1dot, psi3, _, psi1 = rhs_psi(
            surface, sol.coeffs, deform, rates, st.eq.qb0, sol.p_field,
            prev_psi1=prev.psi1, dt=prev.dt,
        )
        psi = 0.5 * (psi1dot + 1j * psi3)
        cache["last"] = {
            "sol": sol, "gvar": gvar, "bvar": bvar, "rates": rates,
            "psi1": psi1, "a1dot": a1dot, "a2dot": a2dot,
        }
        return grid.reflect(psi)

    return assembler, cache


def step(state: FlowState):
    """One explicit-Euler step; returns the appended trace record."""
    cfg = state.config
    if state.statics is None:
        state.statics = _build_statics(state)
    st = state.statics
    surface, metric, grid = state.surface, state.metric, state.surface.grid
    assembler, cache = _make_assembler(state)
    phi = _phi_for(state, state.t)
    problem = BoundaryProblem(
        grid=grid, lam=st.lam, phi=phi, A=st.a_field, B=st.b_field,
        e0_point=st.e0_point, e0_weight=st.e0_weight, e_swap=True,
        x0_node=st.x0_vek,
    )
    if cfg.parameter_policy == "fixed" or st.n < 0:
        params = np.asarray(cfg.fixed_params, dtype=float)
        if params.size != st.sym.family_size:
            params = np.zeros(st.sym.family_size)
        family = bvp_solve(problem, assembler, tol=cfg.tol_bvp,
                           max_iter=cfg.max_iter_bvp, params=params,
                           mode=cfg.bvp_mode, sym=st.sym)
        family.basis = list(st.sym.basis)
        proj = ProjectionResult(params=params,
                                dimension_before=st.sym.family_size,
                                dimension_after=st.sym.family_size,
                                rank=0, point_residual=float(abs(family.w[st.x0_vek])))
        w_final = family.w
        fam_for_trace = family
    else:
        family, _ = solve_family(problem, assembler, tol=cfg.tol_bvp,
                                 max_iter=cfg.max_iter_bvp, mode=cfg.bvp_mode,
                                 sym=st.sym)
        proj = project_parameters(family, st.x0_vek)
        # iterate the point condition: the measured basis is accurate to the
        # coupling floor, so each correction shrinks |w(x0)| by that factor
        nb = len(family.basis)
        mat = np.empty((2, nb))
        for i, bfield in enumerate(family.basis):
            mat[0, i] = bfield[st.x0_vek].real
            mat[1, i] = bfield[st.x0_vek].imag
        pinv = np.linalg.pinv(mat)
        params = proj.params.copy()
        final = None
        for _ in range(4):
            final = bvp_solve(problem, assembler, tol=cfg.tol_bvp,
                              max_iter=cfg.max_iter_bvp, params=params,
                              mode=cfg.bvp_mode, sym=st.sym)
            v0 = final.w[st.x0_vek]
            if abs(v0) <= 1e-12:
                break
            params = params + pinv @ np.array([-v0.real, -v0.imag])
        proj.params = params
        proj.point_residual = float(abs(final.w[st.x0_vek]))
        w_final = final.w
        fam_for_trace = final

    # refresh the cached cdot/kpres pieces at the final iterate
    assembler(w_final)
    last = cache["last"]
    sol = last["sol"]
    a1dot, a2dot, cdot = last["a1dot"], last["a2dot"], sol.cdot

    dt = cfg.dt
    a1_new = state.deform.a1 + dt * a1dot
    a2_new = state.deform.a2 + dt * a2dot
    c_new = state.deform.c + dt * cdot
    zdot = state.deform.rate_displacement(a1dot, a2dot, cdot)
    hist_old = state.deform.history
    z_new = (
        a1_new[:, None] * surface.y1
        + a2_new[:, None] * surface.y2
        + c_new[:, None] * surface.n
    )
    tau = np.concatenate([hist_old.tau, [state.t + dt]])
    zs = np.concatenate([hist_old.z, z_new[None]], axis=0)
    zds = np.concatenate([hist_old.zdot, zdot[None]], axis=0)
    zds[-2] = zdot  # the rate actually used to leave the previous sample
    hist_new = TransportHistory(tau, zs, zds)
    deform_new = DeformationState(
        surface=surface, a1=a1_new, a2=a2_new, c=c_new,
        a1dot=a1dot, a2dot=a2dot, cdot=cdot, history=hist_new,
        t=state.t + dt,
    )

    # monitors at the advanced state
    gvar_n, bvar_n, _ = assemble_variation(metric, surface, deform_new,
                                           substeps=cfg.substeps)
    k_scale = float(np.max(np.abs(surface.K)))
    dk_rel = float(np.max(np.abs(bvar_n.dK))) / k_scale
    if cfg.check_every and (state.step_index % cfg.check_every == 0):
        k_def = gauss_curvature_of(grid, metric, surface.y + z_new)
        k_base = gauss_curvature_of(grid, metric, surface.y)
        dk_oracle = float(np.max(np.abs(k_def - k_base))) / k_scale
    else:
        dk_oracle = np.nan
    g_res_fields = gdef_normal_residual(metric, surface, deform_new,
                                        substeps=cfg.substeps)
    g_res = float(np.max(np.abs(g_res_fields)))
    theta = grid.boundary_theta
    v_field = np.einsum(
        "ni,nsi->ns", state.boundary.l_field(theta), surface.tangents()[grid.boundary_idx]
    )
    lhs = np.einsum("nab,na,nb->n", surface.ambient_a[grid.boundary_idx],
                    z_new[grid.boundary_idx], v_field)
    gamma_target = state.boundary.gamma(theta, state.t + dt)
    b_res = float(np.max(np.abs(lhs - gamma_target)))
    z_x0 = float(np.linalg.norm(z_new[cfg.x0_node]))

    rec = StepRecord(
        step=state.step_index, t_new=state.t + dt, n=st.n,
        dk_max_rel=dk_rel, dk_oracle_rel=dk_oracle, g_residual=g_res,
        boundary_residual=b_res, fixed_point_z=z_x0,
        bvp_iterations=fam_for_trace.iterations, bvp_ratio=fam_for_trace.ratio,
        bvp_mode=fam_for_trace.mode,
        bvp_fixed_point_residual=fam_for_trace.fixed_point_residual,
        cdot_iterations=sol.iterations, cdot_rate=sol.rate,
        cdot_residual=sol.residual,
        family_dimension_before=proj.dimension_before,
        family_dimension_after=proj.dimension_after,
        params=[float(p) for p in np.atleast_1d(proj.params)],
        rate_sup=float(np.max(np.abs(zdot))),
        step_displacement=float(dt * np.max(np.abs(zdot))),
    )
    if cfg.capture_fields:
        rec.fields = {
            "a1": a1_new, "a2": a2_new, "c": c_new, "dK": bvar_n.dK,
            "g_res1": g_res_fields[:, 0], "g_res2": g_res_fields[:, 1],
        }

    state.prev = PrevRecords(coeffs=sol.coeffs, m4=last["bvar"].m4,
                             psi1=last["psi1"], dt=dt)
    state.deform = deform_new
    state.t += dt
    state.step_index += 1
    state.records.append(rec)
    return rec


def run_flow(state: FlowState):
    """Iterate steps to t_final; one dt-halving retry on contraction loss."""
    cfg = state.config
    halved = False
    while state.t < cfg.t_final - 1e-12:
        try:
            step(state)
        except (NoContractionError, ContractionFailureError, ConvergenceError):
            if halved:
                raise
            halved = True
            cfg.dt = cfg.dt / 2.0
    recs = state.records
    report = {
        "steps": len(recs),
        "t_final": state.t,
        "index": state.statics.n if state.statics else None,
        "max_dk_rel": max(r.dk_max_rel for r in recs) if recs else 0.0,
        "max_dk_oracle_rel": max(
            (r.dk_oracle_rel for r in recs if not np.isnan(r.dk_oracle_rel)),
            default=0.0,
        ),
        "max_g_residual": max(r.g_residual for r in recs) if recs else 0.0,
        "max_boundary_residual": max(r.boundary_residual for r in recs) if recs else 0.0,
        "max_fixed_point_z": max(r.fixed_point_z for r in recs) if recs else 0.0,
        "family_dimension_after": recs[-1].family_dimension_after if recs else None,
        "family_dimension_before": recs[-1].family_dimension_before if recs else None,
        "max_rate_sup": max(r.rate_sup for r in recs) if recs else 0.0,
    }
    return report
