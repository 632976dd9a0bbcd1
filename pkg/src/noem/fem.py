"""Energy functionals and classical linear-FE reference solves.

The PDE is posed through its energy density ``F[u](x) = k(x)/2 |grad u|^2
- f(x) u(x)`` plus Neumann boundary work ``-k h u`` on flux-tagged facets.
Element energies, gradients and Hessians are closed-form for linear shape
functions; the coefficient and source are evaluated at cell centroids.

Dirichlet data is imposed by row/column elimination with symmetric
correction, so a hybrid solve with zero NOE regions reproduces the
classical FEM solution to solver precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, build_dof_map

FIELD_FORMAT_VERSION = 1


class PdeError(ValueError):
    pass


def as_point_function(f):
    """Normalize scalars / callables to a callable on an (N, d) point array."""
    if callable(f):
        return f
    value = float(f)
    return lambda pts: np.full(len(np.atleast_2d(pts)), value)


@dataclass
class GriddedField:
    """Values on a regular grid with linear / bilinear interpolation.

    1D: ``axes=(x,)`` and ``values`` of shape (nx,).
    2D: ``axes=(x, y)`` and ``values`` of shape (nx, ny).
    """

    axes: tuple
    values: np.ndarray

    def __call__(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if len(self.axes) == 1:
            return np.interp(pts[:, 0], self.axes[0], self.values)
        x, y = self.axes
        ix = np.clip(np.searchsorted(x, pts[:, 0]) - 1, 0, len(x) - 2)
        iy = np.clip(np.searchsorted(y, pts[:, 1]) - 1, 0, len(y) - 2)
        tx = np.clip((pts[:, 0] - x[ix]) / (x[ix + 1] - x[ix]), 0.0, 1.0)
        ty = np.clip((pts[:, 1] - y[iy]) / (y[iy + 1] - y[iy]), 0.0, 1.0)
        v = self.values
        return (
            v[ix, iy] * (1 - tx) * (1 - ty)
            + v[ix + 1, iy] * tx * (1 - ty)
            + v[ix, iy + 1] * (1 - tx) * ty
            + v[ix + 1, iy + 1] * tx * ty
        )


@dataclass
class PdeModel:
    """Coefficient, source and boundary data defining the energy functional."""

    coefficient: object = 1.0
    source: object = 0.0
    dirichlet: dict = field(default_factory=dict)
    neumann: dict = field(default_factory=dict)
    nonlinearity: object = None  # optional K'(u) for coefficient-depends-on-u

    def coefficient_at(self, pts):
        vals = as_point_function(self.coefficient)(pts)
        if np.any(np.asarray(vals) <= 0.0):
            raise PdeError("coefficient must be strictly positive wherever evaluated")
        return np.asarray(vals, dtype=float)

    def source_at(self, pts):
        return np.asarray(as_point_function(self.source)(pts), dtype=float)

    def boundary_value(self, tag, pts):
        return np.asarray(as_point_function(self.dirichlet[tag])(pts), dtype=float)


def dirichlet_constraints(mesh, model):
    """Constrained node -> value map; checks BC coverage of tagged facets."""
    constrained = {}
    for facet, tag in mesh.boundary_tags.items():
        in_d, in_n = tag in model.dirichlet, tag in model.neumann
        if in_d and in_n:
            raise PdeError(f"boundary tag {tag!r} appears in both dirichlet and neumann maps")
        if not (in_d or in_n):
            raise PdeError(f"boundary tag {tag!r} has no boundary condition")
        if in_d:
            pts = mesh.nodes[list(facet)]
            vals = model.boundary_value(tag, pts)
            for node, val in zip(facet, vals):
                constrained[int(node)] = float(val)
    return constrained


# ---------------------------------------------------------------------------
# closed-form element energies


def element_energy(cell_coords, local_values, k_cell, f_cell):
    """Exact energy/gradient/Hessian of one linear element.

    ``cell_coords``: (2, 1) segment or (3, 2) triangle vertex coordinates;
    the coefficient ``k_cell`` and source ``f_cell`` are the centroid
    values.  The Hessian is symmetric positive semidefinite for k > 0.
    """
    coords = np.asarray(cell_coords, dtype=float)
    u = np.asarray(local_values, dtype=float)
    if coords.shape[0] == 2:  # 1D segment
        h = coords[1, 0] - coords[0, 0]
        if h <= 0:
            raise PdeError("degenerate segment")
        K = (k_cell / h) * np.array([[1.0, -1.0], [-1.0, 1.0]])
        load = f_cell * h / 2.0 * np.ones(2)
    else:  # linear triangle
        p0, p1, p2 = coords
        jac = np.array([p1 - p0, p2 - p0]).T
        det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
        area = 0.5 * det
        if area <= 0:
            raise PdeError("degenerate or negatively oriented triangle")
        b = np.array(
            [
                [p1[1] - p2[1], p2[1] - p0[1], p0[1] - p1[1]],
                [p2[0] - p1[0], p0[0] - p2[0], p1[0] - p0[0]],
            ]
        ) / (2.0 * area)
        K = k_cell * area * (b.T @ b)
        load = f_cell * area / 3.0 * np.ones(3)
    value = 0.5 * u @ K @ u - load @ u
    grad = K @ u - load
    return value, grad, K


def _triangle_geometry(mesh):
    cached = getattr(mesh, "_tri_geometry", None)
    if cached is not None:
        return cached
    p = mesh.nodes[mesh.fe_cells]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    b = np.empty((len(p), 2, 3))
    b[:, 0, 0] = p[:, 1, 1] - p[:, 2, 1]
    b[:, 0, 1] = p[:, 2, 1] - p[:, 0, 1]
    b[:, 0, 2] = p[:, 0, 1] - p[:, 1, 1]
    b[:, 1, 0] = p[:, 2, 0] - p[:, 1, 0]
    b[:, 1, 1] = p[:, 0, 0] - p[:, 2, 0]
    b[:, 1, 2] = p[:, 1, 0] - p[:, 0, 0]
    b /= (2.0 * area)[:, None, None]
    centroid = p.mean(axis=1)
    mesh._tri_geometry = (area, b, centroid)
    return area, b, centroid


def assemble_fe(mesh, model, values, coefficient_override=None):
    """Energy value, gradient and Hessian triplets of the FE part.

    ``values`` is the full nodal vector.  ``coefficient_override`` supplies
    per-cell coefficient values (used by Picard iterations on nonlinear
    coefficients).  Returns ``(J, G, (rows, cols, vals))`` over all nodes,
    without boundary elimination.
    """
    n = mesh.n_nodes
    G = np.zeros(n)
    if len(mesh.fe_cells) == 0:
        J = 0.0
        rows = cols = np.zeros(0, dtype=np.intp)
        vals = np.zeros(0)
    elif mesh.dimension == 1:
        x = mesh.nodes[mesh.fe_cells, 0]
        h = x[:, 1] - x[:, 0]
        mid = 0.5 * (x[:, 0] + x[:, 1])
        pts = np.column_stack([mid])
        k = model.coefficient_at(pts) if coefficient_override is None else coefficient_override
        f = model.source_at(pts)
        u = values[mesh.fe_cells]
        du = u[:, 1] - u[:, 0]
        J = float(np.sum(0.5 * k * du**2 / h - f * h * 0.5 * (u[:, 0] + u[:, 1])))
        ge = np.empty_like(u)
        ge[:, 0] = -k * du / h - f * h / 2.0
        ge[:, 1] = k * du / h - f * h / 2.0
        np.add.at(G, mesh.fe_cells.ravel(), ge.ravel())
        kl = (k / h)[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])[None]
        rows = np.repeat(mesh.fe_cells, 2, axis=1).ravel()
        cols = np.tile(mesh.fe_cells, (1, 2)).ravel()
        vals = kl.ravel()
    else:
        area, b, centroid = _triangle_geometry(mesh)
        k = model.coefficient_at(centroid) if coefficient_override is None else coefficient_override
        f = model.source_at(centroid)
        u = values[mesh.fe_cells]
        grad_u = np.einsum("mdi,mi->md", b, u)
        J = float(
            np.sum(0.5 * k * area * np.einsum("md,md->m", grad_u, grad_u))
            - np.sum(f * area * u.mean(axis=1))
        )
        kl = (k * area)[:, None, None] * np.einsum("mdi,mdj->mij", b, b)
        ge = np.einsum("mij,mj->mi", kl, u) - (f * area / 3.0)[:, None]
        np.add.at(G, mesh.fe_cells.ravel(), ge.ravel())
        rows = np.repeat(mesh.fe_cells, 3, axis=1).ravel()
        cols = np.tile(mesh.fe_cells, (1, 3)).ravel()
        vals = kl.ravel()

    # Neumann boundary work: -k * h * u integrated over flux-tagged facets
    for facet, tag in mesh.boundary_tags.items():
        flux = model.neumann.get(tag)
        if flux is None:
            continue
        idx = list(facet)
        pts = mesh.nodes[idx]
        mid = pts.mean(axis=0, keepdims=True)
        hval = float(as_point_function(flux)(mid)[0])
        if hval == 0.0:
            continue
        kval = float(model.coefficient_at(mid)[0])
        if mesh.dimension == 1:
            J -= kval * hval * values[idx[0]]
            G[idx[0]] -= kval * hval
        else:
            length = float(np.linalg.norm(pts[1] - pts[0]))
            w = kval * hval * length / 2.0
            J -= w * (values[idx[0]] + values[idx[1]])
            G[idx[0]] -= w
            G[idx[1]] -= w
    return J, G, (rows, cols, vals)


def _solve_linear_step(mesh, model, dof_map, values, coefficient_override=None):
    """One exact Newton/linear step: solve K_ff d = -G_f from ``values``."""
    _, G, (rows, cols, vals) = assemble_fe(mesh, model, values, coefficient_override)
    n = mesh.n_nodes
    K = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    free = dof_map.free
    K_ff = K[free][:, free]
    rhs = -G[free]
    try:
        delta = spla.spsolve(K_ff.tocsc(), rhs)
    except RuntimeError as exc:  # pragma: no cover - solver-dependent
        raise PdeError(f"singular system: {exc}") from exc
    if not np.all(np.isfinite(delta)):
        raise PdeError(
            "singular system: the assembled operator annihilates a nonzero "
            "vector (likely an untied component or pure-Neumann null space)"
        )
    out = values.copy()
    out[free] += delta
    return out


def solve_reference(mesh, model, nonlinearity_cfg=None):
    """Classical FEM solve on an all-FE mesh; returns a :class:`Field`.

    Linear problems reduce to a single solve with Dirichlet elimination.
    For a solution-dependent coefficient (``model.nonlinearity``), a damped
    Picard iteration re-freezes the coefficient at cell centroids until the
    relative update drops below tolerance.
    """
    if mesh.noe_subdomains:
        raise PdeError("solve_reference expects an all-FE mesh")
    constrained = dirichlet_constraints(mesh, model)
    if not constrained:
        # compatible pure-Neumann problem: pin the first node
        constrained = {0: 0.0}
    dof_map = build_dof_map(mesh, constrained)
    values = np.zeros(mesh.n_nodes)
    values[dof_map.constrained] = dof_map.constrained_values

    if model.nonlinearity is None:
        values = _solve_linear_step(mesh, model, dof_map, values)
        return Field(mesh, values)

    cfg = {"relaxation": 0.5, "tol": 1e-10, "max_iter": 200}
    if nonlinearity_cfg:
        cfg.update(nonlinearity_cfg)
    if mesh.dimension == 1:
        x = mesh.nodes[mesh.fe_cells, 0]
        centroid = np.column_stack([0.5 * (x[:, 0] + x[:, 1])])
    else:
        _, _, centroid = _triangle_geometry(mesh)
    u_cell = np.zeros(len(mesh.fe_cells))
    history = []
    for iteration in range(cfg["max_iter"]):
        k_cell = np.asarray(model.nonlinearity(u_cell), dtype=float)
        if np.any(k_cell <= 0):
            raise PdeError("nonlinear coefficient produced non-positive values")
        new_values = _solve_linear_step(mesh, model, dof_map, values, coefficient_override=k_cell)
        relax = cfg["relaxation"]
        mixed = (1 - relax) * values + relax * new_values
        denom = max(np.linalg.norm(mixed), 1e-30)
        update = np.linalg.norm(mixed - values) / denom
        history.append(update)
        values = mixed
        u_cell = values[mesh.fe_cells].mean(axis=1)
        if update <= cfg["tol"]:
            return Field(mesh, values)
    raise PdeError(
        f"nonlinear reference solve did not converge in {cfg['max_iter']} iterations; "
        f"residual history tail: {history[-5:]}"
    )


# ---------------------------------------------------------------------------
# fields and point evaluation


class _Locator:
    """Bucket-grid point location over FE cells."""

    def __init__(self, mesh):
        self.mesh = mesh
        if mesh.dimension == 1:
            x = mesh.nodes[mesh.fe_cells, 0]
            order = np.argsort(x[:, 0], kind="stable")
            self.seg_order = order
            self.seg_left = x[order, 0]
            self.seg_right = x[order, 1]
            return
        p = mesh.nodes[mesh.fe_cells]
        self.lo = p.min(axis=1)
        self.hi = p.max(axis=1)
        self.bounds = (mesh.nodes.min(axis=0), mesh.nodes.max(axis=0))
        span = np.maximum(self.bounds[1] - self.bounds[0], 1e-12)
        self.nb = max(1, int(np.sqrt(len(p) / 2)))
        self.cell_size = span / self.nb
        self.buckets = {}
        ilo = np.clip(((self.lo - self.bounds[0]) / self.cell_size).astype(int), 0, self.nb - 1)
        ihi = np.clip(((self.hi - self.bounds[0]) / self.cell_size).astype(int), 0, self.nb - 1)
        for c in range(len(p)):
            for i in range(ilo[c, 0], ihi[c, 0] + 1):
                for j in range(ilo[c, 1], ihi[c, 1] + 1):
                    self.buckets.setdefault((i, j), []).append(c)
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.inv = np.empty((len(p), 2, 2))
        self.inv[:, 0, 0] = e2[:, 1] / det
        self.inv[:, 0, 1] = -e2[:, 0] / det
        self.inv[:, 1, 0] = -e1[:, 1] / det
        self.inv[:, 1, 1] = e1[:, 0] / det
        self.p0 = p[:, 0]

    def locate(self, pts, tol=1e-9):
        """Cell index and barycentric coordinates per point (-1 if outside)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = len(pts)
        cells = np.full(n, -1, dtype=np.intp)
        if self.mesh.dimension == 1:
            bary = np.zeros((n, 2))
            x = pts[:, 0]
            idx = np.clip(np.searchsorted(self.seg_left, x, side="right") - 1, 0, len(self.seg_left) - 1)
            for shift in (0, 1):
                trial = np.clip(idx - shift, 0, len(self.seg_left) - 1)
                ok = (
                    (cells < 0)
                    & (x >= self.seg_left[trial] - tol)
                    & (x <= self.seg_right[trial] + tol)
                )
                cells[ok] = self.seg_order[trial[ok]]
                h = self.seg_right[trial[ok]] - self.seg_left[trial[ok]]
                t = (x[ok] - self.seg_left[trial[ok]]) / h
                bary[ok, 0] = 1 - t
                bary[ok, 1] = t
            return cells, bary
        bary = np.zeros((n, 3))
        for i, pt in enumerate(pts):
            bx = int(np.clip((pt[0] - self.bounds[0][0]) / self.cell_size[0], 0, self.nb - 1))
            by = int(np.clip((pt[1] - self.bounds[0][1]) / self.cell_size[1], 0, self.nb - 1))
            for c in self.buckets.get((bx, by), ()):
                lam = self.inv[c] @ (pt - self.p0[c])
                l0 = 1.0 - lam[0] - lam[1]
                if lam[0] >= -tol and lam[1] >= -tol and l0 >= -tol:
                    cells[i] = c
                    bary[i] = (l0, lam[0], lam[1])
                    break
        return cells, bary


@dataclass
class Field:
    """Piecewise-linear nodal field on an all-FE mesh (or the FE part)."""

    mesh: Mesh
    values: np.ndarray
    _locator: object = None

    def __post_init__(self):
        if len(self.values) != self.mesh.n_nodes:
            raise PdeError(
                f"field has {len(self.values)} values for {self.mesh.n_nodes} nodes"
            )

    def locator(self):
        if self._locator is None:
            self._locator = _Locator(self.mesh)
        return self._locator

    def evaluate(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        cells, bary = self.locator().locate(pts)
        if np.any(cells < 0):
            bad = pts[cells < 0][0]
            raise PdeError(f"point {tuple(bad)} lies outside the meshed region")
        return np.einsum("pi,pi->p", self.values[self.mesh.fe_cells[cells]], bary)

    def derivative(self, pts):
        """Per-cell (piecewise constant) gradient at the query points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        cells, _ = self.locator().locate(pts)
        if np.any(cells < 0):
            bad = pts[cells < 0][0]
            raise PdeError(f"point {tuple(bad)} lies outside the meshed region")
        if self.mesh.dimension == 1:
            x = self.mesh.nodes[self.mesh.fe_cells[cells], 0]
            u = self.values[self.mesh.fe_cells[cells]]
            return ((u[:, 1] - u[:, 0]) / (x[:, 1] - x[:, 0]))[:, None]
        _, b, _ = _triangle_geometry(self.mesh)
        u = self.values[self.mesh.fe_cells[cells]]
        return np.einsum("pdi,pi->pd", b[cells], u)

    def __call__(self, pts):
        return self.evaluate(pts)


def field_to_text(field_obj):
    lines = [f"noem-field {FIELD_FORMAT_VERSION} dim {field_obj.mesh.dimension}"]
    for p, v in zip(field_obj.mesh.nodes, field_obj.values):
        lines.append(" ".join(repr(float(c)) for c in p) + " " + repr(float(v)))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# evaluation grids and error norms


@dataclass
class EvaluationGrid:
    points: np.ndarray
    weights: np.ndarray


def interval_grid(a, b, n=600):
    h = (b - a) / n
    mids = a + h * (np.arange(n) + 0.5)
    return EvaluationGrid(mids[:, None], np.full(n, h))


def rect_grid(rect, n_per_axis=80, hole_polygons=()):
    from .mesh import points_in_convex_polygon

    x0, y0, x1, y1 = rect
    hx, hy = (x1 - x0) / n_per_axis, (y1 - y0) / n_per_axis
    xs = x0 + hx * (np.arange(n_per_axis) + 0.5)
    ys = y0 + hy * (np.arange(n_per_axis) + 0.5)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    keep = np.ones(len(pts), dtype=bool)
    for poly in hole_polygons:
        keep &= ~points_in_convex_polygon(pts, poly)
    pts = pts[keep]
    return EvaluationGrid(pts, np.full(len(pts), hx * hy))


def _evaluate(candidate, pts):
    if hasattr(candidate, "evaluate"):
        return np.asarray(candidate.evaluate(pts), dtype=float)
    return np.asarray(candidate(pts), dtype=float)


def relative_l2_error(candidate, reference, grid):
    """``||candidate - reference||_2 / ||reference||_2`` on a fixed grid."""
    c = _evaluate(candidate, grid.points)
    r = _evaluate(reference, grid.points)
    ref_norm = np.sqrt(np.sum(grid.weights * r**2))
    if ref_norm == 0.0:
        raise PdeError("relative error undefined: reference is identically zero")
    return float(np.sqrt(np.sum(grid.weights * (c - r) ** 2)) / ref_norm)


def l2_norm(values, grid):
    return float(np.sqrt(np.sum(grid.weights * np.asarray(values) ** 2)))


def relative_derivative_error(candidate, reference, grid, component=0):
    """Relative L2 error of one spatial derivative component."""

    def d_of(obj):
        if hasattr(obj, "derivative"):
            return np.asarray(obj.derivative(grid.points))[:, component]
        return np.asarray(obj(grid.points))[:, component]

    c, r = d_of(candidate), d_of(reference)
    ref_norm = np.sqrt(np.sum(grid.weights * r**2))
    if ref_norm == 0.0:
        raise PdeError("relative error undefined: reference derivative is identically zero")
    return float(np.sqrt(np.sum(grid.weights * (c - r) ** 2)) / ref_norm)
