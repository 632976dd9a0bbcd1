"""Gaussian-process and parametric samplers for boundary/coefficient spaces."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist


class SamplingError(ValueError):
    pass


_JITTERS = [0.0] + [10.0**e for e in range(-12, -5)]


class GpSampler:
    """Zero-mean GP with squared-exponential covariance on a fixed grid.

    ``grid``: (m, d) evaluation points, or (m,) scalar parameters (e.g.
    arclengths).  With ``periodic_length`` the scalar parameter is treated
    as periodic: distances are chordal distances of the circle embedding,
    which keeps the covariance positive definite while making samples
    continuous across the wrap point.
    """

    def __init__(self, grid, correlation_length, variance=1.0, seed=0, periodic_length=None):
        self.grid = np.asarray(grid, dtype=float)
        self.correlation_length = float(correlation_length)
        self.variance = float(variance)
        self.seed = int(seed)
        self.periodic_length = periodic_length
        pts = self.grid if self.grid.ndim == 2 else self.grid[:, None]
        if periodic_length is not None:
            if pts.shape[1] != 1:
                raise SamplingError("periodic sampling expects a scalar parameter grid")
            L = float(periodic_length)
            ds = np.abs(pts - pts.T)
            dist = (L / np.pi) * np.sin(np.pi * ds / L)
        else:
            dist = cdist(pts, pts)
        cov = self.variance * np.exp(-0.5 * (dist / self.correlation_length) ** 2)
        self._chol = self._factor(cov)
        self._rng = np.random.default_rng(self.seed)

    @staticmethod
    def _factor(cov):
        for jitter in _JITTERS:
            try:
                return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
            except np.linalg.LinAlgError:
                continue
        eigs = np.linalg.eigvalsh(cov)
        raise SamplingError(
            "covariance not positive definite after maximum jitter 1e-6 "
            f"(eigenvalue range [{eigs[0]:.3e}, {eigs[-1]:.3e}])"
        )

    def sample(self, n, transform=None):
        """Draw ``n`` GP samples from the sampler's own seeded stream."""
        if n < 1:
            raise SamplingError("need n >= 1 samples")
        z = self._rng.standard_normal((n, len(self._chol)))
        out = z @ self._chol.T
        return transform(out) if transform is not None else out

    def sample_with_rng(self, rng, transform=None):
        """One sample from an externally supplied generator (per-sample seeds)."""
        out = rng.standard_normal(len(self._chol)) @ self._chol.T
        return transform(out) if transform is not None else out


def threshold_transform(low=3.0, high=12.0):
    """Two-level transform: ``low`` where w <= 0, ``high`` where w > 0."""

    def apply(w):
        return np.where(np.asarray(w) > 0.0, high, low)

    return apply


def perimeter_arclengths(points):
    """Cumulative arclength of an ordered closed polyline, plus its length."""
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1] + np.linalg.norm(pts[0] - pts[-1])
    return s, total


def trace_interpolator(sensor_coords, total_length=None):
    """Maps boundary points to piecewise-linear interpolants of sensor values.

    Returns ``interp(values)`` which itself returns a callable usable as a
    Dirichlet boundary function on the region boundary: points are mapped to
    their arclength position along the sensor loop and values interpolated
    periodically.
    """
    coords = np.asarray(sensor_coords, dtype=float)
    s, total = perimeter_arclengths(coords)
    if total_length is not None:
        total = float(total_length)
    s_ext = np.concatenate([s, [total]])

    def project(points):
        pts = np.atleast_2d(points)
        n = len(coords)
        best_d = np.full(len(pts), np.inf)
        best_s = np.zeros(len(pts))
        for i in range(n):
            a = coords[i]
            b = coords[(i + 1) % n]
            ab = b - a
            denom = float(ab @ ab)
            t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
            proj = a + t[:, None] * ab
            d = np.linalg.norm(pts - proj, axis=1)
            closer = d < best_d
            best_d[closer] = d[closer]
            seg_len = s_ext[i + 1] - s_ext[i]
            best_s[closer] = s_ext[i] + t[closer] * seg_len
        return best_s

    def make(values):
        vals = np.asarray(values, dtype=float)
        v_ext = np.concatenate([vals, [vals[0]]])

        def bc(points):
            return np.interp(project(points), s_ext, v_ext)

        return bc

    return make


def uniform_draw(rng, low, high, size=None):
    return rng.uniform(low, high, size=size)
