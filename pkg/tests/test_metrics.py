import numpy as np
import pytest

from mgdeform.errors import DegenerateMetricError
from mgdeform.metrics import (
    AmbientMetric,
    FlatMetric,
    christoffel_at,
    conformal_linear_metric,
    conformal_radial_metric,
    make_metric,
    metric_compatibility_residual,
    norm_monitor,
)


def fd_dmetric(metric, y, step=1e-6):
    out = np.empty(y.shape[:-1] + (3, 3, 3))
    for s in range(3):
        e = np.zeros(3)
        e[s] = step
        out[..., s] = (metric.metric(y + e) - metric.metric(y - e)) / (2 * step)
    return out


def test_flat_christoffel_zero():
    m = FlatMetric()
    pts = np.random.default_rng(0).normal(size=(7, 3))
    ch = christoffel_at(m, pts)
    assert np.max(np.abs(ch.gamma_upper)) == 0.0


def test_conformal_linear_christoffel_pattern():
    # metric e^{2 y1} delta at the origin
    m = conformal_linear_metric((1.0, 0.0, 0.0))
    ch = christoffel_at(m, np.zeros((1, 3)))
    g = ch.gamma_upper[0]
    assert abs(g[0, 0, 0] - 1.0) < 1e-12
    assert abs(g[0, 1, 1] + 1.0) < 1e-12
    assert abs(g[1, 0, 1] - 1.0) < 1e-12
    assert abs(g[1, 1, 0] - 1.0) < 1e-12
    # symmetry in the lower pair
    assert np.max(np.abs(g - np.swapaxes(g, 1, 2))) < 1e-14


def test_christoffel_against_fd_oracle():
    # direct formula evaluated with finite-difference metric derivatives
    m = conformal_linear_metric((0.7, -0.3, 0.2))
    rng = np.random.default_rng(1)
    pts = 0.5 * rng.normal(size=(5, 3))
    a = m.metric(pts)
    da = fd_dmetric(m, pts)
    ainv = np.linalg.inv(a)
    low = 0.5 * (
        np.einsum("...mba->...abm", da)
        + np.einsum("...mab->...abm", da)
        - da
    )
    expect = np.einsum("...gm,...abm->...gab", ainv, low)
    ch = christoffel_at(m, pts)
    assert np.max(np.abs(ch.gamma_upper - expect)) < 1e-8


def test_metric_compatibility_residual_small():
    for m in (conformal_linear_metric((0.4, 0.1, -0.2)), conformal_radial_metric(0.6)):
        pts = 0.4 * np.random.default_rng(2).normal(size=(6, 3))
        assert metric_compatibility_residual(m, pts) < 1e-8


def test_lowered_consistent_with_raised():
    m = conformal_radial_metric(0.8)
    pts = 0.3 * np.random.default_rng(3).normal(size=(4, 3))
    ch = christoffel_at(m, pts)
    a = m.metric(pts)
    relowered = np.einsum("...gb,...gas->...asb", a, ch.gamma_upper)
    assert np.max(np.abs(relowered - ch.gamma_lower)) < 1e-12


def test_degenerate_metric_raises():
    class Bad(AmbientMetric):
        def metric(self, y):
            y = np.asarray(y)
            out = np.zeros(y.shape[:-1] + (3, 3))
            out[..., 0, 0] = -1.0
            out[..., 1, 1] = 1.0
            out[..., 2, 2] = 1.0
            return out

    with pytest.raises(DegenerateMetricError):
        christoffel_at(Bad(), np.zeros((2, 3)))


def test_fd_fallback_matches_analytic():
    m = conformal_linear_metric((0.5, 0.2, 0.0))

    class NumericOnly(AmbientMetric):
        def metric(self, y):
            return m.metric(y)

    pts = 0.2 * np.random.default_rng(4).normal(size=(3, 3))
    d_analytic = m.dmetric(pts)
    d_numeric = NumericOnly().dmetric(pts)
    assert np.max(np.abs(d_analytic - d_numeric)) < 1e-8


def test_norm_monitor_and_factory():
    m = make_metric("conformal_radial", {"alpha": 0.3})
    pts = 0.5 * np.random.default_rng(5).normal(size=(10, 3))
    rep = norm_monitor(m, pts)
    assert rep["within_bound"]
    with pytest.raises(KeyError):
        make_metric("nope")
