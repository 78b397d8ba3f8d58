"""Polar tensor grid on the closed unit disk.

Nodes are the disk center plus ``n_r`` rings of ``n_theta`` equally spaced
angles, with the outermost ring lying on the boundary circle.  Fields live on
the flat node axis (center first, then ring-major) and may carry trailing
tensor axes.  Differentiation is spectral in the angle and one-dimensional
finite differences of order four along rays; every ray is extended through
the center onto its antipodal ray so that no one-sided stencil is needed away
from the rim.
"""

from __future__ import annotations

import numpy as np

from .errors import MgError

_GAUSS4_X, _GAUSS4_W = np.polynomial.legendre.leggauss(4)


def fd_weights(x, x0, m):
    """Finite-difference weights for the m-th derivative at x0 on nodes x."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    c = np.zeros((n, m + 1))
    c1 = 1.0
    c4 = x[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


def _lagrange_integral_weights(xs, a, b):
    """Integrals over [a, b] of the Lagrange basis on nodes xs."""
    xs = np.asarray(xs, dtype=float)
    w = np.zeros(len(xs))
    for k in range(len(xs)):
        others = np.delete(xs, k)
        poly = np.poly(others) / np.prod(xs[k] - others)
        anti = np.polyint(poly)
        w[k] = np.polyval(anti, b) - np.polyval(anti, a)
    return w


class DiskGrid:
    """Disk discretization shared by every field-valued module."""

    def __init__(self, n_r: int, n_theta: int):
        if n_r < 8:
            raise MgError(f"n_r must be >= 8, got {n_r}")
        if n_theta < 16:
            raise MgError(f"n_theta must be >= 16, got {n_theta}")
        if n_theta % 2 != 0:
            raise MgError(f"n_theta must be even, got {n_theta}")
        self.n_r = n_r
        self.n_theta = n_theta
        self.n_nodes = 1 + n_r * n_theta
        self.h = 1.0 / n_r
        self.dtheta = 2.0 * np.pi / n_theta

        self.r_levels = np.arange(n_r + 1) * self.h  # 0 = center
        thetas = np.arange(n_theta) * self.dtheta
        rr = np.repeat(self.r_levels[1:], n_theta)
        tt = np.tile(thetas, n_r)
        self.r = np.concatenate([[0.0], rr])
        self.theta = np.concatenate([[0.0], tt])
        self.x1 = self.r * np.cos(self.theta)
        self.x2 = self.r * np.sin(self.theta)
        self.x1[0] = 0.0
        self.x2[0] = 0.0
        self.z = self.x1 + 1j * self.x2
        self.boundary_idx = self.node_index(n_r, np.arange(n_theta))
        self.boundary_theta = thetas
        self._build_area_weights()
        self._build_radial_stencils()
        self._build_cumint_weights()
        self._kernel_cache = None
        self._caches = {}

    # -- indexing -----------------------------------------------------------

    def node_index(self, i, j):
        """Flat index of ring i (1..n_r), angle slot j (mod n_theta)."""
        j = np.asarray(j) % self.n_theta
        return 1 + (np.asarray(i) - 1) * self.n_theta + j

    def _split(self, f):
        f = np.asarray(f)
        shape_tail = f.shape[1:]
        flat = f.reshape(self.n_nodes, -1)
        center = flat[0]
        rings = flat[1:].reshape(self.n_r, self.n_theta, -1)
        return center, rings, shape_tail

    def _join(self, center, rings, shape_tail):
        flat = np.concatenate(
            [center.reshape(1, -1), rings.reshape(self.n_r * self.n_theta, -1)]
        )
        return flat.reshape((self.n_nodes,) + shape_tail)

    # -- quadrature ---------------------------------------------------------

    def _build_area_weights(self):
        h, nt = self.h, self.n_theta
        w = np.empty(self.n_nodes)
        w[0] = np.pi * (h / 2.0) ** 2
        for i in range(1, self.n_r + 1):
            if i < self.n_r:
                band = self.r_levels[i] * h
            else:
                band = h / 2.0 - h * h / 8.0
            w[self.node_index(i, np.arange(nt))] = band * self.dtheta
        # split the rim half-band between the last two rings so that the
        # radial first moment matches (the rim node sits off its band centroid)
        i1 = (h / 2.0 - h * h / 8.0)
        m1 = -h * h / 8.0 + h**3 / 24.0  # first moment about r = 1
        w_in = -m1 / h
        w_rim = i1 - w_in
        w[self.node_index(self.n_r, np.arange(nt))] = w_rim * self.dtheta
        w[self.node_index(self.n_r - 1, np.arange(nt))] += w_in * self.dtheta
        self.area_weights = w

    def integrate(self, f):
        """Area integral over the closed disk."""
        return np.tensordot(self.area_weights, np.asarray(f), axes=(0, 0))

    # -- radial stencils -----------------------------------------------------

    def _ext_index_table(self):
        """Node indices of each ray extended through the center, r=-1..1."""
        n_r, nt = self.n_r, self.n_theta
        half = nt // 2
        idx = np.empty((2 * n_r + 1, nt), dtype=int)
        idx[n_r] = 0  # center row
        for i in range(1, n_r + 1):
            idx[n_r + i] = self.node_index(i, np.arange(nt))
            idx[n_r - i] = self.node_index(i, (np.arange(nt) + half) % nt)
        return idx

    def _build_radial_stencils(self):
        n_r = self.n_r
        width = 7  # 6th-order first derivative
        ext_r = (np.arange(2 * n_r + 1) - n_r) * self.h
        ext_idx = self._ext_index_table()
        stencil_idx = np.empty((n_r, width, self.n_theta), dtype=int)
        stencil_w = np.empty((n_r, width))
        half = width // 2
        for i in range(1, n_r + 1):
            k = n_r + i
            lo = min(k - half, 2 * n_r - (width - 1))
            rows = np.arange(lo, lo + width)
            stencil_w[i - 1] = fd_weights(ext_r[rows], ext_r[k], 1)
            stencil_idx[i - 1] = ext_idx[rows]
        self._dr_idx = stencil_idx
        self._dr_w = stencil_w

    def d_r(self, f):
        """Radial derivative on rings; the center slot is set to zero."""
        center, rings, tail = self._split(f)
        flat = np.asarray(f).reshape(self.n_nodes, -1)
        vals = flat[self._dr_idx]  # (n_r, 5, n_theta, M)
        out_rings = np.einsum("is,isjm->ijm", self._dr_w, vals)
        out_center = np.zeros_like(center)
        return self._join(out_center, out_rings, tail)

    def d_theta(self, f):
        """Angular derivative (spectral); zero at the center."""
        center, rings, tail = self._split(f)
        nt = self.n_theta
        k = np.fft.fftfreq(nt, d=1.0 / nt)
        k[nt // 2] = 0.0  # odd derivative of the Nyquist mode
        spec = np.fft.fft(rings, axis=1)
        spec *= (1j * k)[None, :, None]
        out = np.fft.ifft(spec, axis=1)
        if not np.iscomplexobj(rings):
            out = out.real
        return self._join(np.zeros_like(center), out, tail)

    def _center_gradient(self, f):
        """(d/dx1, d/dx2) at the center from m=1 ring modes (6th order).

        The m=1 Fourier coefficient of a smooth field along ring r expands in
        odd powers of r; Richardson over the first three rings isolates the
        linear term, whose real/imag parts carry the Cartesian gradient.
        """
        _, rings, _ = self._split(f)
        h = self.h
        vand = np.array(
            [[(k * h) ** p for p in (1, 3, 5)] for k in (1, 2, 3)]
        )
        w = np.linalg.solve(vand.T, np.array([1.0, 0.0, 0.0]))
        alpha_p = 0.0
        alpha_m = 0.0
        for i in range(3):
            spec = np.fft.fft(rings[i], axis=0) / self.n_theta
            alpha_p = alpha_p + w[i] * spec[1]
            alpha_m = alpha_m + w[i] * spec[-1]
        fx = alpha_p + alpha_m
        fy = 1j * (alpha_p - alpha_m)
        if not np.iscomplexobj(np.asarray(f)):
            fx, fy = fx.real, fy.real
        return fx, fy

    def ddx1(self, f):
        """Cartesian derivative along x1."""
        fr = self.d_r(f)
        ft = self.d_theta(f)
        cos = np.cos(self.theta)
        sin = np.sin(self.theta)
        rinv = np.zeros_like(self.r)
        rinv[1:] = 1.0 / self.r[1:]
        shape = (self.n_nodes,) + (1,) * (np.asarray(f).ndim - 1)
        out = cos.reshape(shape) * fr - (sin * rinv).reshape(shape) * ft
        fx, _ = self._center_gradient(f)
        out[0] = fx.reshape(np.asarray(f).shape[1:])
        return out

    def ddx2(self, f):
        """Cartesian derivative along x2."""
        fr = self.d_r(f)
        ft = self.d_theta(f)
        cos = np.cos(self.theta)
        sin = np.sin(self.theta)
        rinv = np.zeros_like(self.r)
        rinv[1:] = 1.0 / self.r[1:]
        shape = (self.n_nodes,) + (1,) * (np.asarray(f).ndim - 1)
        out = sin.reshape(shape) * fr + (cos * rinv).reshape(shape) * ft
        _, fy = self._center_gradient(f)
        out[0] = fy.reshape(np.asarray(f).shape[1:])
        return out

    def dz_bar(self, f):
        """Wirtinger derivative 0.5*(d/dx1 + i d/dx2)."""
        return 0.5 * (self.ddx1(f) + 1j * self.ddx2(f))

    def dz(self, f):
        return 0.5 * (self.ddx1(f) - 1j * self.ddx2(f))

    # -- cumulative radial integration ---------------------------------------

    def _build_cumint_weights(self):
        n_r = self.n_r
        rs = self.r_levels
        w = np.zeros((n_r, 4))
        starts = np.zeros(n_r, dtype=int)
        for i in range(1, n_r + 1):
            s0 = int(np.clip(i - 2, 0, n_r - 3))
            starts[i - 1] = s0
            w[i - 1] = _lagrange_integral_weights(rs[s0 : s0 + 4], rs[i - 1], rs[i])
        self._cum_starts = starts
        self._cum_w = w

    def _ray_values(self, f):
        """Field values along each ray: shape (n_r + 1, n_theta, M)."""
        center, rings, tail = self._split(f)
        rays = np.empty((self.n_r + 1, self.n_theta, rings.shape[2]), dtype=rings.dtype)
        rays[0] = center[None, :]
        rays[1:] = rings
        return rays, tail

    def cumint_radial(self, f):
        """Cumulative integral of f along each ray from the center outward."""
        rays, tail = self._ray_values(f)
        n_r = self.n_r
        incr = np.empty((n_r, self.n_theta, rays.shape[2]), dtype=rays.dtype)
        for i in range(n_r):
            s0 = self._cum_starts[i]
            incr[i] = np.einsum("s,sjm->jm", self._cum_w[i], rays[s0 : s0 + 4])
        cum = np.cumsum(incr, axis=0)
        center = np.zeros(rays.shape[2], dtype=rays.dtype)
        return self._join(center, cum, tail)

    def line_integral_center(self, p, q):
        """Integral of p dx1 + q dx2 along straight rays from the center."""
        cos = np.cos(self.boundary_theta)
        sin = np.sin(self.boundary_theta)
        p_rays, tail = self._ray_values(p)
        q_rays, _ = self._ray_values(q)
        integrand = p_rays * cos[None, :, None] + q_rays * sin[None, :, None]
        n_r = self.n_r
        incr = np.empty((n_r, self.n_theta, p_rays.shape[2]), dtype=p_rays.dtype)
        for i in range(n_r):
            s0 = self._cum_starts[i]
            incr[i] = np.einsum("s,sjm->jm", self._cum_w[i], integrand[s0 : s0 + 4])
        cum = np.cumsum(incr, axis=0)
        center = np.zeros(p_rays.shape[2], dtype=p_rays.dtype)
        return self._join(center, cum, tail)

    # -- interpolation and generic segments ----------------------------------

    def interp(self, f, r_pts, theta_pts):
        """Bilinear interpolation in (r, theta); center handled as r=0 value."""
        center, rings, tail = self._split(f)
        r_pts = np.asarray(r_pts, dtype=float)
        theta_pts = np.asarray(theta_pts, dtype=float)
        u = np.clip(r_pts / self.h, 0.0, self.n_r)
        i0 = np.minimum(u.astype(int), self.n_r - 1)
        fu = u - i0
        v = (theta_pts / self.dtheta) % self.n_theta
        j0 = np.minimum(v.astype(int), self.n_theta - 1)
        fv = v - j0
        j1 = (j0 + 1) % self.n_theta

        rays = np.empty((self.n_r + 1, self.n_theta, rings.shape[2]), dtype=rings.dtype)
        rays[0] = center[None, :]
        rays[1:] = rings
        f00 = rays[i0, j0]
        f01 = rays[i0, j1]
        f10 = rays[i0 + 1, j0]
        f11 = rays[i0 + 1, j1]
        fu = fu[:, None]
        fv = fv[:, None]
        val = (
            f00 * (1 - fu) * (1 - fv)
            + f01 * (1 - fu) * fv
            + f10 * fu * (1 - fv)
            + f11 * fu * fv
        )
        return val.reshape(r_pts.shape + tail)

    def line_integral_from(self, x0_node, p, q):
        """Integral of p dx1 + q dx2 along straight segments x0 -> node.

        The center base point uses the exact on-ray samples; any other grid
        node falls back to composite Gauss quadrature with interpolation.
        """
        if x0_node == 0:
            return self.line_integral_center(p, q)
        x0 = np.array([self.x1[x0_node], self.x2[x0_node]])
        out = np.zeros(self.n_nodes, dtype=np.result_type(np.asarray(p), np.asarray(q)))
        targets = np.stack([self.x1, self.x2], axis=1)
        deltas = targets - x0[None, :]
        n_panels = 2 * self.n_r
        tpan = np.linspace(0.0, 1.0, n_panels + 1)
        mid = 0.5 * (tpan[:-1] + tpan[1:])
        halfw = 0.5 * (tpan[1] - tpan[0])
        tq = (mid[:, None] + halfw * _GAUSS4_X[None, :]).ravel()
        wq = np.tile(_GAUSS4_W * halfw, n_panels)
        for node in range(self.n_nodes):
            if node == x0_node:
                continue
            pts = x0[None, :] + tq[:, None] * deltas[node][None, :]
            rr = np.hypot(pts[:, 0], pts[:, 1])
            th = np.arctan2(pts[:, 1], pts[:, 0])
            pv = self.interp(p, rr, th)
            qv = self.interp(q, rr, th)
            out[node] = np.sum(wq * (pv * deltas[node, 0] + qv * deltas[node, 1]))
        return out

    # -- reflection (coordinate relabel x1 <-> x2) ----------------------------

    def reflection_permutation(self):
        """Node permutation realizing (x1, x2) -> (x2, x1)."""
        if self.n_theta % 4 != 0:
            raise MgError("reflection requires n_theta divisible by 4")
        quarter = self.n_theta // 4
        perm = np.empty(self.n_nodes, dtype=int)
        perm[0] = 0
        j = np.arange(self.n_theta)
        for i in range(1, self.n_r + 1):
            perm[self.node_index(i, j)] = self.node_index(i, (quarter - j) % self.n_theta)
        return perm

    def reflect(self, f):
        perm = self.reflection_permutation()
        return np.asarray(f)[perm]
