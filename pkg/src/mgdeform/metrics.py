"""Ambient Riemannian metrics and their Christoffel symbols.

A metric plug-in evaluates the symmetric tensor a[alpha, beta] at batches of
ambient points, together with its first and second coordinate derivatives.
Closed-form derivatives are supplied where available; the base class falls
back to central differences with step 1e-5.

Index conventions on arrays: metric (..., a, b); first derivative
(..., a, b, s) meaning d a_{ab} / d y^s; Christoffel symbols (..., g, a, b)
for Gamma^g_{ab}, lowered form (..., a, s, b) for Gamma_{as,b}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMetricError

_FD_STEP = 1e-5


class AmbientMetric:
    """Base metric plug-in with finite-difference derivative fallbacks."""

    #: diagnostic bound used by hypothesis monitors
    m0_bound = 1e3

    def metric(self, y):
        raise NotImplementedError

    def dmetric(self, y):
        y = np.asarray(y, dtype=float)
        out = np.empty(y.shape[:-1] + (3, 3, 3))
        for s in range(3):
            e = np.zeros(3)
            e[s] = _FD_STEP
            out[..., s] = (self.metric(y + e) - self.metric(y - e)) / (2 * _FD_STEP)
        return out

    def d2metric(self, y):
        y = np.asarray(y, dtype=float)
        out = np.empty(y.shape[:-1] + (3, 3, 3, 3))
        for t in range(3):
            e = np.zeros(3)
            e[t] = _FD_STEP
            out[..., t] = (self.dmetric(y + e) - self.dmetric(y - e)) / (2 * _FD_STEP)
        return out

    def is_flat(self):
        return False


class FlatMetric(AmbientMetric):
    """Euclidean metric; every derived transport quantity vanishes."""

    def metric(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape[:-1] + (3, 3))
        out[..., 0, 0] = out[..., 1, 1] = out[..., 2, 2] = 1.0
        return out

    def dmetric(self, y):
        y = np.asarray(y, dtype=float)
        return np.zeros(y.shape[:-1] + (3, 3, 3))

    def d2metric(self, y):
        y = np.asarray(y, dtype=float)
        return np.zeros(y.shape[:-1] + (3, 3, 3, 3))

    def is_flat(self):
        return True


class ConformalMetric(AmbientMetric):
    """Metric e^{2 phi(y)} delta with a closed-form scalar exponent.

    ``phi_fn`` maps (..., 3) points to scalars; ``grad_fn`` and ``hess_fn``
    return the gradient (..., 3) and Hessian (..., 3, 3).
    """

    def __init__(self, phi_fn, grad_fn, hess_fn):
        self.phi_fn = phi_fn
        self.grad_fn = grad_fn
        self.hess_fn = hess_fn

    def metric(self, y):
        y = np.asarray(y, dtype=float)
        phi = self.phi_fn(y)
        eye = np.eye(3)
        return np.exp(2.0 * phi)[..., None, None] * eye

    def dmetric(self, y):
        y = np.asarray(y, dtype=float)
        phi = self.phi_fn(y)
        grad = self.grad_fn(y)
        eye = np.eye(3)
        fac = 2.0 * np.exp(2.0 * phi)
        return fac[..., None, None, None] * eye[..., :, :, None] * grad[..., None, None, :]

    def d2metric(self, y):
        y = np.asarray(y, dtype=float)
        phi = self.phi_fn(y)
        grad = self.grad_fn(y)
        hess = self.hess_fn(y)
        eye = np.eye(3)
        fac = 2.0 * np.exp(2.0 * phi)
        core = hess + 2.0 * grad[..., :, None] * grad[..., None, :]
        return (
            fac[..., None, None, None, None]
            * eye[..., :, :, None, None]
            * core[..., None, None, :, :]
        )


def conformal_linear_metric(k=(1.0, 0.0, 0.0)):
    """Metric e^{2 k.y} delta."""
    k = np.asarray(k, dtype=float)

    def phi(y):
        return y @ k

    def grad(y):
        return np.broadcast_to(k, y.shape).copy()

    def hess(y):
        return np.zeros(y.shape[:-1] + (3, 3))

    return ConformalMetric(phi, grad, hess)


def conformal_radial_metric(alpha=0.5):
    """Metric e^{2 phi} delta with phi = alpha (|y|^2 - 1) / 2.

    Equals the identity on the unit sphere |y| = 1 while keeping a nonzero
    gradient there, so sphere caps stay conjugate isothermal under it.
    """

    def phi(y):
        return 0.5 * alpha * (np.sum(y * y, axis=-1) - 1.0)

    def grad(y):
        return alpha * y

    def hess(y):
        eye = np.eye(3)
        return alpha * np.broadcast_to(eye, y.shape[:-1] + (3, 3)).copy()

    return ConformalMetric(phi, grad, hess)


METRIC_KINDS = {
    "flat": lambda params: FlatMetric(),
    "conformal_linear": lambda params: conformal_linear_metric(
        (params.get("k1", 1.0), params.get("k2", 0.0), params.get("k3", 0.0))
    ),
    "conformal_radial": lambda params: conformal_radial_metric(params.get("alpha", 0.5)),
}


def make_metric(kind, params=None):
    params = params or {}
    if kind not in METRIC_KINDS:
        raise KeyError(f"unknown metric kind {kind!r}; valid: {sorted(METRIC_KINDS)}")
    return METRIC_KINDS[kind](params)


@dataclass
class ChristoffelField:
    """Christoffel symbols at a batch of points."""

    gamma_upper: np.ndarray  # (..., g, a, b)
    gamma_lower: np.ndarray  # (..., a, s, b) = Gamma_{as,b}


def check_positive_definite(a, det_tol=1e-14):
    """Leading principal minors of a symmetric (...,3,3) batch."""
    m1 = a[..., 0, 0]
    m2 = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    m3 = np.linalg.det(a)
    ok = (m1 > 0) & (m2 > 0) & (m3 > det_tol)
    return ok, m3


def christoffel_at(metric: AmbientMetric, points) -> ChristoffelField:
    """Gamma^g_{ab} = 0.5 a^{gm} (d_a a_{mb} + d_b a_{ma} - d_m a_{ab})."""
    y = np.asarray(points, dtype=float)
    a = metric.metric(y)
    ok, det = check_positive_definite(a)
    if not np.all(ok):
        bad = np.argwhere(~ok)
        raise DegenerateMetricError(
            f"metric not positive definite at {bad.shape[0]} point(s); "
            f"first offending index {tuple(bad[0])}, det={det[tuple(bad[0])]:.3e}"
        )
    da = metric.dmetric(y)  # (..., a, b, s)
    ainv = np.linalg.inv(a)
    # lowered: Gamma_{ab,m} = 0.5 (d_a a_{mb} + d_b a_{ma} - d_m a_{ab})
    low = 0.5 * (
        np.einsum("...mba->...abm", da)
        + np.einsum("...mab->...abm", da)
        - da
    )
    gamma_upper = np.einsum("...gm,...abm->...gab", ainv, low)
    # same array read as Gamma_{as,b} = low[..., a, s, b]
    return ChristoffelField(gamma_upper=gamma_upper, gamma_lower=low)


def metric_compatibility_residual(metric: AmbientMetric, points):
    """Sup of | d a_{ab}/dy^s - (Gamma_{as,b} + Gamma_{bs,a}) |."""
    y = np.asarray(points, dtype=float)
    da = metric.dmetric(y)  # (..., a, b, s)
    ch = christoffel_at(metric, y)
    low = ch.gamma_lower  # (..., a, s, b)
    recon = np.einsum("...asb->...abs", low) + np.einsum("...bsa->...abs", low)
    return float(np.max(np.abs(da - recon)))


def norm_monitor(metric: AmbientMetric, points):
    """Discrete sup norms of the metric and its derivatives vs the bound."""
    y = np.asarray(points, dtype=float)
    sup_a = float(np.max(np.abs(metric.metric(y))))
    sup_da = float(np.max(np.abs(metric.dmetric(y))))
    sup_d2a = float(np.max(np.abs(metric.d2metric(y))))
    bound = metric.m0_bound
    return {
        "sup_metric": sup_a,
        "sup_dmetric": sup_da,
        "sup_d2metric": sup_d2a,
        "m0_bound": bound,
        "within_bound": max(sup_a, sup_da, sup_d2a) < bound,
    }
