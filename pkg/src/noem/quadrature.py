"""Quadrature rules over NOE subdomains.

Interval and box regions use (composite) tensor-product Gauss-Legendre
rules; box-minus-polygon regions use a strictly-interior degree-2 rule on
a triangulation of the region.  All points are strictly inside the region
and the weights sum to the region's (polygon-corrected) measure.
"""

from __future__ import annotations

import numpy as np

from .mesh import triangulate_annulus


def gauss_legendre_interval(a, b, order=4, subdivisions=1):
    z, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, subdivisions + 1)
    pts, wts = [], []
    for lo, hi in zip(edges, edges[1:]):
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        pts.append(mid + half * z)
        wts.append(half * w)
    return np.concatenate(pts)[:, None], np.concatenate(wts)


def gauss_legendre_box(bounds, order=4, subdivisions=1):
    x0, y0, x1, y1 = bounds
    px, wx = gauss_legendre_interval(x0, x1, order, subdivisions)
    py, wy = gauss_legendre_interval(y0, y1, order, subdivisions)
    gx, gy = np.meshgrid(px[:, 0], py[:, 0], indexing="ij")
    ww = np.outer(wx, wy)
    return np.column_stack([gx.ravel(), gy.ravel()]), ww.ravel()


def triangle_rule(nodes, triangles):
    """Degree-2 rule with strictly interior points (barycentric 2/3,1/6,1/6)."""
    p = nodes[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    pts = np.einsum("qk,mki->mqi", bary, p).reshape(-1, 2)
    wts = np.repeat(area / 3.0, 3)
    return pts, wts


def region_quadrature(region, order=4, subdivisions=1, triangulation_mesh=None,
                      outer_refine=None, n_rings=None):
    """Points and weights for a NOE region, in global coordinates."""
    if region.kind == "interval":
        return gauss_legendre_interval(*region.bounds, order=order, subdivisions=subdivisions)
    if region.kind == "box":
        return gauss_legendre_box(region.bounds, order=order, subdivisions=subdivisions)
    if region.kind == "box_minus_polygon":
        if triangulation_mesh is None:
            center = region.polygon.mean(axis=0)
            radius = float(np.linalg.norm(region.polygon[0] - center))
            if outer_refine is None:
                outer_refine = max(4, len(region.sensor_nodes) // 4)
            triangulation_mesh = triangulate_annulus(
                region.bounds,
                (center, radius),
                n_polygon=len(region.polygon),
                n_rings=n_rings,
                outer_refine=outer_refine,
            )
        return triangle_rule(triangulation_mesh.nodes, triangulation_mesh.fe_cells)
    raise ValueError(f"no quadrature for region kind {region.kind!r}")
