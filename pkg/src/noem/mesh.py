"""Meshes partitioned into linear FE cells and neural-operator subdomains.

1D meshes are interval partitions; 2D meshes are structured triangle grids
(each grid square split into two triangles) with axis-aligned subdomain
boxes, optionally minus a polygonal hole.  Subdomain boundary sensors are
mesh nodes shared verbatim with the adjacent FE cells, ordered
left-to-right in 1D and counterclockwise from the lower-left corner in 2D.

Circular holes are represented by inscribed regular polygons so that the
solver meshes and the fine reference meshes describe exactly the same
geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MESH_FORMAT_VERSION = 1
_GRID_TOL = 1e-9


class MeshError(ValueError):
    pass


# ---------------------------------------------------------------------------
# polygon helpers (holes are convex regular polygons)


def regular_polygon(center, radius, n_sides):
    """Vertices of the inscribed regular ``n_sides``-gon, CCW from angle 0."""
    ang = 2.0 * np.pi * np.arange(n_sides) / n_sides
    return np.column_stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])


def polygon_area(vertices):
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def points_in_convex_polygon(points, vertices, include_boundary=True):
    """Half-plane test for a CCW convex polygon; vectorized over points."""
    pts = np.atleast_2d(points)
    inside = np.ones(len(pts), dtype=bool)
    for i in range(len(vertices)):
        a = vertices[i]
        b = vertices[(i + 1) % len(vertices)]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        if include_boundary:
            inside &= cross >= -_GRID_TOL
        else:
            inside &= cross > _GRID_TOL
    return inside


def distance_to_polygon(points, vertices):
    """Unsigned distance from each point to the polygon boundary, plus the
    unit direction away from the nearest boundary point."""
    pts = np.atleast_2d(points)
    best = np.full(len(pts), np.inf)
    nearest = np.zeros((len(pts), 2))
    n = len(vertices)
    for i in range(n):
        a, b = vertices[i], vertices[(i + 1) % n]
        ab = b - a
        t = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.linalg.norm(pts - proj, axis=1)
        closer = d < best
        best[closer] = d[closer]
        nearest[closer] = proj[closer]
    diff = pts - nearest
    norms = np.maximum(np.linalg.norm(diff, axis=1, keepdims=True), 1e-300)
    return best, diff / norms


# ---------------------------------------------------------------------------
# core types


@dataclass
class NoeRegion:
    """One neural-operator subdomain.

    ``kind`` is ``interval`` (bounds (a, b)), ``box`` (bounds
    (x0, y0, x1, y1)) or ``box_minus_polygon`` (box bounds plus a CCW hole
    polygon).  ``sensor_nodes`` index into the owning mesh's node table.
    """

    kind: str
    bounds: tuple
    sensor_nodes: np.ndarray
    model_id: str = "default"
    polygon: np.ndarray | None = None

    def measure(self):
        if self.kind == "interval":
            return self.bounds[1] - self.bounds[0]
        x0, y0, x1, y1 = self.bounds
        area = (x1 - x0) * (y1 - y0)
        if self.kind == "box_minus_polygon":
            area -= polygon_area(self.polygon)
        return area

    def contains(self, points, include_boundary=True):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "interval":
            a, b = self.bounds
            x = pts[:, 0]
            if include_boundary:
                return (x >= a - _GRID_TOL) & (x <= b + _GRID_TOL)
            return (x > a + _GRID_TOL) & (x < b - _GRID_TOL)
        x0, y0, x1, y1 = self.bounds
        tol = _GRID_TOL if include_boundary else -_GRID_TOL
        inside = (
            (pts[:, 0] >= x0 - tol)
            & (pts[:, 0] <= x1 + tol)
            & (pts[:, 1] >= y0 - tol)
            & (pts[:, 1] <= y1 + tol)
        )
        if self.kind == "box_minus_polygon":
            inside &= ~points_in_convex_polygon(pts, self.polygon, include_boundary=not include_boundary)
        return inside


@dataclass
class Mesh:
    """FE cells plus NOE regions forming a disjoint partition of the domain."""

    dimension: int
    nodes: np.ndarray  # (N, dim)
    fe_cells: np.ndarray  # (M, 2) segments or (M, 3) triangles
    noe_subdomains: list = field(default_factory=list)
    boundary_tags: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return len(self.nodes)

    def cell_measures(self):
        if self.dimension == 1:
            x = self.nodes[self.fe_cells, 0]
            return x[:, 1] - x[:, 0]
        p = self.nodes[self.fe_cells]
        return 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
        )

    def total_measure(self):
        total = float(np.abs(self.cell_measures()).sum())
        return total + sum(r.measure() for r in self.noe_subdomains)

    def validate(self):
        """Cheap structural invariants: index ranges, cell measure, sensors."""
        if len(self.fe_cells) and self.fe_cells.max() >= self.n_nodes:
            raise MeshError("cell references a missing node")
        if len(self.fe_cells):
            meas = self.cell_measures()
            if np.any(np.abs(meas) < 1e-14):
                raise MeshError("zero-measure cell")
            if self.dimension == 2 and np.any(meas <= 0):
                raise MeshError("negatively oriented triangle")
        for region in self.noe_subdomains:
            if len(region.sensor_nodes) and region.sensor_nodes.max() >= self.n_nodes:
                raise MeshError("sensor references a missing node")
        return self

    def boundary_facets(self):
        """Facets (sorted node tuples) belonging to exactly one cell."""
        if self.dimension == 1:
            counts = np.bincount(self.fe_cells.ravel(), minlength=self.n_nodes)
            return [(int(i),) for i in np.nonzero(counts == 1)[0]]
        edges = {}
        for tri in self.fe_cells:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (int(min(a, b)), int(max(a, b)))
                edges[key] = edges.get(key, 0) + 1
        return [e for e, c in edges.items() if c == 1]


@dataclass
class DofMap:
    """Global numbering of the free/constrained solution coefficients.

    Global indices coincide with mesh node indices; interior nodes of NOE
    regions never exist in the node table, so every index belongs to an FE
    cell or a sensor set.  Interface nodes shared between FE cells and
    regions keep a single index, which couples the two representations.
    """

    n_dofs: int
    free: np.ndarray
    constrained: np.ndarray
    constrained_values: np.ndarray

    def full_vector(self, free_values):
        c = np.zeros(self.n_dofs)
        c[self.constrained] = self.constrained_values
        c[self.free] = free_values
        return c


def build_dof_map(mesh, constrained_values):
    """``constrained_values``: dict node index -> fixed (Dirichlet) value."""
    constrained = np.array(sorted(constrained_values), dtype=np.intp)
    values = np.array([constrained_values[i] for i in constrained], dtype=float)
    referenced = set(map(int, mesh.fe_cells.ravel()))
    for r in mesh.noe_subdomains:
        referenced.update(map(int, r.sensor_nodes))
    if len(referenced) != mesh.n_nodes:
        raise MeshError("mesh has nodes not referenced by any cell or region")
    mask = np.ones(mesh.n_nodes, dtype=bool)
    mask[constrained] = False
    return DofMap(mesh.n_nodes, np.nonzero(mask)[0], constrained, values)


# ---------------------------------------------------------------------------
# 1D builder


def build_interval_mesh(domain, breakpoints, region_spec, model_id="default"):
    """Partition [x0, x1] at ``breakpoints`` into FE/NOE segments.

    ``region_spec`` has one entry per segment: an int (uniform FE
    refinement count), the string ``"noe"``, or ``("noe", model_id)``.
    """
    x0, x1 = float(domain[0]), float(domain[1])
    breaks = [float(b) for b in breakpoints]
    if any(b2 <= b1 for b1, b2 in zip(breaks, breaks[1:])):
        raise MeshError("breakpoints must be strictly increasing")
    if breaks and (breaks[0] <= x0 or breaks[-1] >= x1):
        raise MeshError("breakpoints must lie strictly inside the domain")
    edges = [x0] + breaks + [x1]
    if len(region_spec) != len(edges) - 1:
        raise MeshError(f"expected {len(edges) - 1} region entries, got {len(region_spec)}")

    coords = [x0]
    cells = []
    regions = []
    for (a, b), spec in zip(zip(edges, edges[1:]), region_spec):
        if b - a <= 0:
            raise MeshError("zero-length segment")
        if spec == "noe" or (isinstance(spec, tuple) and spec[0] == "noe"):
            mid = spec[1] if isinstance(spec, tuple) else model_id
            left = len(coords) - 1
            coords.append(b)
            regions.append(
                NoeRegion("interval", (a, b), np.array([left, left + 1], dtype=np.intp), mid)
            )
        else:
            n = int(spec)
            if n < 1:
                raise MeshError("FE refinement count must be >= 1")
            start = len(coords) - 1
            coords.extend(a + (b - a) * np.arange(1, n + 1) / n)
            coords[-1] = b  # exact endpoint
            cells.extend((start + i, start + i + 1) for i in range(n))

    nodes = np.array(coords, dtype=float)[:, None]
    mesh = Mesh(
        dimension=1,
        nodes=nodes,
        fe_cells=np.array(cells, dtype=np.intp).reshape(-1, 2),
        noe_subdomains=regions,
        boundary_tags={(0,): "left", (len(nodes) - 1,): "right"},
    )
    return mesh.validate()


# ---------------------------------------------------------------------------
# 2D structured builder


def _grid_index(value, origin, cell, name):
    k = (value - origin) / cell
    if abs(k - round(k)) > 1e-7:
        raise MeshError(f"{name}={value} does not lie on the grid (cell={cell})")
    return int(round(k))


def _boxes_overlap(a, b):
    return a[0] < b[2] - _GRID_TOL and b[0] < a[2] - _GRID_TOL and a[1] < b[3] - _GRID_TOL and b[1] < a[3] - _GRID_TOL


def build_structured_mesh_2d(
    rect, cell_size, noe_boxes, holes=None, model_ids=None, n_polygon=32
):
    """Structured triangle mesh of ``rect`` with NOE boxes carved out.

    Each grid square outside the boxes is split into two triangles.  Each
    box (minus its polygonal hole, when given) becomes one NOE region; its
    sensors are the grid nodes on the box perimeter.  Boxes must be
    grid-conforming and pairwise disjoint; holes strictly inside a box.
    """
    rx0, ry0, rx1, ry1 = map(float, rect)
    h = float(cell_size)
    nx = _grid_index(rx1, rx0, h, "rect width")
    ny = _grid_index(ry1, ry0, h, "rect height")

    boxes = [tuple(map(float, b)) for b in noe_boxes]
    for b in boxes:
        for v, o, name in ((b[0], rx0, "box x0"), (b[2], rx0, "box x1")):
            _grid_index(v, o, h, name)
        for v, o, name in ((b[1], ry0, "box y0"), (b[3], ry0, "box y1")):
            _grid_index(v, o, h, name)
        if not (rx0 - _GRID_TOL <= b[0] < b[2] <= rx1 + _GRID_TOL and ry0 - _GRID_TOL <= b[1] < b[3] <= ry1 + _GRID_TOL):
            raise MeshError(f"box {b} not inside the rectangle")
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if _boxes_overlap(boxes[i], boxes[j]):
                raise MeshError(f"boxes {i} and {j} overlap")

    holes = list(holes) if holes else []
    hole_of_box = {}
    for center, radius in holes:
        owner = None
        for bi, b in enumerate(boxes):
            if (
                b[0] + radius < center[0] < b[2] - radius
                and b[1] + radius < center[1] < b[3] - radius
            ):
                owner = bi
                break
        if owner is None:
            raise MeshError(f"hole at {tuple(center)} is not strictly inside any box")
        if owner in hole_of_box:
            raise MeshError(f"box {owner} holds more than one hole")
        hole_of_box[owner] = (np.asarray(center, dtype=float), float(radius))

    if model_ids is None:
        model_ids = ["default"] * len(boxes)
    elif isinstance(model_ids, str):
        model_ids = [model_ids] * len(boxes)

    # grid nodes, keeping only those not strictly inside a box
    xs = rx0 + h * np.arange(nx + 1)
    ys = ry0 + h * np.arange(ny + 1)
    xs[-1], ys[-1] = rx1, ry1
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    grid_pts = np.column_stack([gx.ravel(), gy.ravel()])

    def node_id(i, j):
        return i * (ny + 1) + j

    keep = np.ones(len(grid_pts), dtype=bool)
    box_cells = np.zeros((nx, ny), dtype=bool)
    for b in boxes:
        i0 = _grid_index(b[0], rx0, h, "x")
        i1 = _grid_index(b[2], rx0, h, "x")
        j0 = _grid_index(b[1], ry0, h, "y")
        j1 = _grid_index(b[3], ry0, h, "y")
        box_cells[i0:i1, j0:j1] = True
        for i in range(i0 + 1, i1):
            for j in range(j0 + 1, j1):
                keep[node_id(i, j)] = False

    new_index = np.full(len(grid_pts), -1, dtype=np.intp)
    new_index[keep] = np.arange(keep.sum())
    nodes = grid_pts[keep]

    cells = []
    for i in range(nx):
        for j in range(ny):
            if box_cells[i, j]:
                continue
            n00, n10 = new_index[node_id(i, j)], new_index[node_id(i + 1, j)]
            n11, n01 = new_index[node_id(i + 1, j + 1)], new_index[node_id(i, j + 1)]
            cells.append((n00, n10, n11))
            cells.append((n00, n11, n01))

    regions = []
    for bi, b in enumerate(boxes):
        i0 = _grid_index(b[0], rx0, h, "x")
        i1 = _grid_index(b[2], rx0, h, "x")
        j0 = _grid_index(b[1], ry0, h, "y")
        j1 = _grid_index(b[3], ry0, h, "y")
        sens = []
        sens += [node_id(i, j0) for i in range(i0, i1)]  # bottom, left->right
        sens += [node_id(i1, j) for j in range(j0, j1)]  # right, bottom->top
        sens += [node_id(i, j1) for i in range(i1, i0, -1)]  # top, right->left
        sens += [node_id(i0, j) for j in range(j1, j0, -1)]  # left, top->bottom
        sensor_nodes = new_index[np.array(sens, dtype=np.intp)]
        if bi in hole_of_box:
            center, radius = hole_of_box[bi]
            poly = regular_polygon(center, radius, n_polygon)
            regions.append(
                NoeRegion("box_minus_polygon", b, sensor_nodes, model_ids[bi], polygon=poly)
            )
        else:
            regions.append(NoeRegion("box", b, sensor_nodes, model_ids[bi]))

    mesh = Mesh(
        dimension=2,
        nodes=nodes,
        fe_cells=np.array(cells, dtype=np.intp).reshape(-1, 3),
        noe_subdomains=regions,
    )
    tag_rectangle_boundary(mesh, (rx0, ry0, rx1, ry1))
    return mesh.validate()


def tag_rectangle_boundary(mesh, rect, hole_tag="hole"):
    """Tag boundary facets by position on the rectangle, else ``hole_tag``."""
    rx0, ry0, rx1, ry1 = rect
    tags = {}
    for facet in mesh.boundary_facets():
        pts = mesh.nodes[list(facet)]
        if np.all(np.abs(pts[:, 0] - rx0) < _GRID_TOL):
            tags[facet] = "left"
        elif np.all(np.abs(pts[:, 0] - rx1) < _GRID_TOL):
            tags[facet] = "right"
        elif np.all(np.abs(pts[:, 1] - ry0) < _GRID_TOL):
            tags[facet] = "bottom"
        elif np.all(np.abs(pts[:, 1] - ry1) < _GRID_TOL):
            tags[facet] = "top"
        else:
            tags[facet] = hole_tag
    mesh.boundary_tags = tags
    return mesh


# ---------------------------------------------------------------------------
# square-minus-polygon triangulation (training / reference meshes)


def triangulate_annulus(square, hole, n_polygon=32, n_rings=None, outer_refine=16):
    """Conforming triangle mesh of a square minus an inscribed polygon hole.

    An O-grid of radial triangle rings connects the ``n_polygon``-gon to a
    grid-aligned transition square, outside of which the mesh continues as
    a structured grid with ``outer_refine`` cells per side.  When the
    transition square cannot be separated from the outer boundary the
    O-grid extends to the square boundary itself.  Boundary facets are
    tagged ``outer`` and ``hole``.
    """
    x0, y0, x1, y1 = map(float, square)
    cx, cy = float(hole[0][0]), float(hole[0][1])
    radius = float(hole[1])
    side = x1 - x0
    if abs((y1 - y0) - side) > _GRID_TOL:
        raise MeshError("triangulate_annulus expects a square")
    if n_polygon < 8:
        raise MeshError("n_polygon must be >= 8")
    if not (x0 + radius < cx < x1 - radius and y0 + radius < cy < y1 - radius):
        raise MeshError("hole touches or leaves the square")

    P = int(outer_refine)
    h = side / P
    perimeter_nodes = 4 * P

    # transition square: half-width c*h around the hole center with c = 4L
    # so its perimeter node count 8c is a multiple of n_polygon when
    # n_polygon divides 8c; fall back to the outer square itself.
    ci = (cx - x0) / h
    cj = (cy - y0) / h
    center_on_grid = abs(ci - round(ci)) < 1e-9 and abs(cj - round(cj)) < 1e-9
    ci, cj = int(round(ci)), int(round(cj))

    choice = None
    if center_on_grid:
        for c in range(1, P):
            w = c * h
            if w <= radius + 1.2 * h:
                continue
            if (8 * c) % n_polygon:
                continue
            if ci - c < 0 or cj - c < 0 or ci + c > P or cj + c > P:
                continue
            inner_full = ci - c == 0 and cj - c == 0 and ci + c == P and cj + c == P
            choice = (c, inner_full)
            break
    if choice is None:
        if perimeter_nodes % n_polygon:
            raise MeshError(
                f"outer_refine={P} gives {perimeter_nodes} perimeter nodes, "
                f"not a multiple of n_polygon={n_polygon}"
            )
        # O-grid all the way to the outer square
        return _ogrid_to_square(square, (cx, cy), radius, n_polygon, n_rings, P)

    c, inner_full = choice
    if inner_full:
        return _ogrid_to_square(square, (cx, cy), radius, n_polygon, n_rings, P)

    # structured part: grid squares outside the transition square
    xs = x0 + h * np.arange(P + 1)
    ys = y0 + h * np.arange(P + 1)
    xs[-1], ys[-1] = x1, y1

    def gnode(i, j):
        return i * (P + 1) + j

    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    grid_pts = np.column_stack([gx.ravel(), gy.ravel()])
    keep = np.ones(len(grid_pts), dtype=bool)
    for i in range(ci - c + 1, ci + c):
        for j in range(cj - c + 1, cj + c):
            keep[gnode(i, j)] = False
    new_index = np.full(len(grid_pts), -1, dtype=np.intp)
    new_index[keep] = np.arange(keep.sum())
    nodes = [grid_pts[keep]]
    cells = []
    for i in range(P):
        for j in range(P):
            if ci - c <= i < ci + c and cj - c <= j < cj + c:
                continue
            n00, n10 = new_index[gnode(i, j)], new_index[gnode(i + 1, j)]
            n11, n01 = new_index[gnode(i + 1, j + 1)], new_index[gnode(i, j + 1)]
            cells.append((n00, n10, n11))
            cells.append((n00, n11, n01))

    # transition square perimeter nodes, CCW from its east midpoint height
    ring_ids = _square_perimeter_ids(ci, cj, c, gnode)
    outer_ring = new_index[ring_ids]
    outer_pts = grid_pts[ring_ids]
    n_base = keep.sum()
    og_nodes, og_cells = _ogrid(
        (cx, cy), radius, n_polygon, n_rings, outer_pts, base_index=n_base, outer_ids=outer_ring
    )
    nodes.append(og_nodes)
    cells.extend(og_cells)

    mesh = Mesh(
        dimension=2,
        nodes=np.vstack(nodes),
        fe_cells=np.array(cells, dtype=np.intp),
    )
    _tag_annulus(mesh, square)
    return mesh.validate()


def _square_perimeter_ids(ci, cj, c, gnode):
    """Grid ids around the square [ci-c, ci+c] x [cj-c, cj+c], CCW starting
    at the east edge midpoint (angle 0)."""
    ids = []
    ids += [gnode(ci + c, j) for j in range(cj, cj + c)]  # east, upward
    ids += [gnode(i, cj + c) for i in range(ci + c, ci - c, -1)]  # north, leftward
    ids += [gnode(ci - c, j) for j in range(cj + c, cj - c, -1)]  # west, downward
    ids += [gnode(i, cj - c) for i in range(ci - c, ci + c)]  # south, rightward
    ids += [gnode(ci + c, j) for j in range(cj - c, cj)]  # east below midpoint
    return np.array(ids, dtype=np.intp)


def _square_perimeter_points(square, m_per_side):
    """Points on a square's perimeter, CCW starting at the east midpoint."""
    x0, y0, x1, y1 = square
    xs = np.linspace(x0, x1, m_per_side + 1)
    ys = np.linspace(y0, y1, m_per_side + 1)
    east = np.column_stack([np.full(m_per_side + 1, x1), ys])
    north = np.column_stack([xs[::-1], np.full(m_per_side + 1, y1)])
    west = np.column_stack([np.full(m_per_side + 1, x0), ys[::-1]])
    south = np.column_stack([xs, np.full(m_per_side + 1, y0)])
    loop = np.vstack([east[:-1], north[:-1], west[:-1], south[:-1]])
    # rotate so the loop starts at the east-side midpoint (angle 0)
    return np.roll(loop, -(m_per_side // 2), axis=0)


def _polygon_boundary_points(center, radius, n_polygon, m):
    """``m`` points on the polygon boundary (vertices included), CCW from
    angle 0.  ``m`` must be a multiple of ``n_polygon``."""
    verts = regular_polygon(center, radius, n_polygon)
    per_edge = m // n_polygon
    pts = []
    for i in range(n_polygon):
        a, b = verts[i], verts[(i + 1) % n_polygon]
        for k in range(per_edge):
            t = k / per_edge
            pts.append((1 - t) * a + t * b)
    return np.array(pts)


def _ogrid(center, radius, n_polygon, n_rings, outer_pts, base_index, outer_ids):
    """Radial rings of triangles from the hole polygon to ``outer_pts``.

    Returns the newly created nodes (rings strictly inside, plus the
    polygon boundary) and the triangle list; the outermost ring reuses
    ``outer_ids``.
    """
    m = len(outer_pts)
    if m % n_polygon:
        raise MeshError(f"{m} rays not compatible with a {n_polygon}-gon")
    inner_pts = _polygon_boundary_points(center, radius, n_polygon, m)
    gap = np.linalg.norm(outer_pts - inner_pts, axis=1).mean()
    spacing = np.linalg.norm(outer_pts[0] - outer_pts[1])
    inner_spacing = min(spacing, 2 * np.pi * radius / m)
    if n_rings is None:
        n_rings = max(2, int(round(gap / np.sqrt(inner_spacing * spacing))))
    ts = _graded_positions(n_rings, first_step=inner_spacing / gap)

    rings = []  # ring 0 = polygon boundary, ring n_rings = outer (existing)
    new_nodes = []
    next_id = base_index
    for j in range(n_rings):
        t = ts[j]
        pts = (1 - t) * inner_pts + t * outer_pts
        ids = np.arange(next_id, next_id + m, dtype=np.intp)
        next_id += m
        new_nodes.append(pts)
        rings.append(ids)
    rings.append(outer_ids)

    cells = []
    for j in range(n_rings):
        inner, outer = rings[j], rings[j + 1]
        for k in range(m):
            k1 = (k + 1) % m
            a, b = inner[k], inner[k1]
            cc, d = outer[k1], outer[k]
            cells.append((a, d, cc))
            cells.append((a, cc, b))
    return np.vstack(new_nodes), cells


def _graded_positions(n_steps, first_step):
    """Normalized ring positions 0 = t_0 < ... < t_{n} = 1 whose steps grow
    geometrically from ``first_step`` (keeps cells near the hole close to
    isotropic)."""
    s0 = min(max(first_step, 1e-6), 1.0 / n_steps)
    if n_steps == 1:
        return np.array([0.0, 1.0])
    lo, hi = 1.0, 16.0

    def total(q):
        return s0 * (q**n_steps - 1.0) / (q - 1.0) if q > 1 + 1e-12 else s0 * n_steps

    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if total(mid) < 1.0:
            lo = mid
        else:
            hi = mid
    q = 0.5 * (lo + hi)
    steps = s0 * q ** np.arange(n_steps)
    ts = np.concatenate([[0.0], np.cumsum(steps)])
    return ts / ts[-1]


def _ogrid_to_square(square, center, radius, n_polygon, n_rings, P):
    outer_pts = _square_perimeter_points(square, P)
    m = len(outer_pts)
    outer_ids = np.arange(m, dtype=np.intp)
    og_nodes, og_cells = _ogrid(
        center, radius, n_polygon, n_rings, outer_pts, base_index=m, outer_ids=outer_ids
    )
    mesh = Mesh(
        dimension=2,
        nodes=np.vstack([outer_pts, og_nodes]),
        fe_cells=np.array(og_cells, dtype=np.intp),
    )
    _tag_annulus(mesh, square)
    return mesh.validate()


def _tag_annulus(mesh, square):
    x0, y0, x1, y1 = square
    tags = {}
    for facet in mesh.boundary_facets():
        pts = mesh.nodes[list(facet)]
        on_outer = (
            np.all(np.abs(pts[:, 0] - x0) < _GRID_TOL)
            or np.all(np.abs(pts[:, 0] - x1) < _GRID_TOL)
            or np.all(np.abs(pts[:, 1] - y0) < _GRID_TOL)
            or np.all(np.abs(pts[:, 1] - y1) < _GRID_TOL)
        )
        tags[facet] = "outer" if on_outer else "hole"
    mesh.boundary_tags = tags
    return mesh


def min_triangle_angle(mesh):
    """Smallest interior angle over all triangles, in degrees."""
    p = mesh.nodes[mesh.fe_cells]
    angles = []
    for i in range(3):
        a = p[:, i]
        b = p[:, (i + 1) % 3]
        c = p[:, (i + 2) % 3]
        u, v = b - a, c - a
        cosang = np.einsum("ij,ij->i", u, v) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
        )
        angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    return float(np.min(angles))


# ---------------------------------------------------------------------------
# mesh merging (tiled reference domains)


def merge_meshes(meshes, tol=1e-9):
    """Union of meshes with duplicate nodes (within ``tol``) identified."""
    from scipy.spatial import cKDTree

    all_nodes = np.vstack([m.nodes for m in meshes])
    tree = cKDTree(all_nodes)
    parent = np.arange(len(all_nodes))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in tree.query_pairs(r=tol):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    roots = np.array([find(i) for i in range(len(all_nodes))])
    unique_roots, remap = np.unique(roots, return_inverse=True)
    nodes = all_nodes[unique_roots]

    cells = []
    offset = 0
    for m in meshes:
        cells.append(remap[m.fe_cells + offset])
        offset += m.n_nodes
    merged = Mesh(
        dimension=meshes[0].dimension,
        nodes=nodes,
        fe_cells=np.vstack(cells),
    )
    return merged.validate()


# ---------------------------------------------------------------------------
# serialization (versioned text format)


def mesh_to_text(mesh):
    lines = [f"noem-mesh {MESH_FORMAT_VERSION}", f"dim {mesh.dimension}", f"nodes {mesh.n_nodes}"]
    for p in mesh.nodes:
        lines.append(" ".join(repr(float(v)) for v in p))
    lines.append(f"cells {len(mesh.fe_cells)}")
    for cell in mesh.fe_cells:
        lines.append(" ".join(str(int(i)) for i in cell))
    lines.append(f"regions {len(mesh.noe_subdomains)}")
    for r in mesh.noe_subdomains:
        n_poly = 0 if r.polygon is None else len(r.polygon)
        head = [r.kind, r.model_id, str(len(r.bounds)), *(repr(float(b)) for b in r.bounds), str(n_poly)]
        if r.polygon is not None:
            head += [repr(float(v)) for v in r.polygon.ravel()]
        head.append(str(len(r.sensor_nodes)))
        head += [str(int(i)) for i in r.sensor_nodes]
        lines.append(" ".join(head))
    tags = sorted(mesh.boundary_tags.items())
    lines.append(f"tags {len(tags)}")
    for facet, tag in tags:
        lines.append(" ".join(map(str, facet)) + " " + tag)
    return "\n".join(lines) + "\n"


def mesh_from_text(text):
    lines = text.strip().split("\n")
    header = lines[0].split()
    if header[0] != "noem-mesh":
        raise MeshError("not a mesh file")
    if int(header[1]) != MESH_FORMAT_VERSION:
        raise MeshError(
            f"unsupported mesh format version {header[1]} (expected {MESH_FORMAT_VERSION})"
        )
    pos = 1
    dim = int(lines[pos].split()[1])
    pos += 1
    n_nodes = int(lines[pos].split()[1])
    pos += 1
    nodes = np.array([[float(v) for v in lines[pos + i].split()] for i in range(n_nodes)])
    pos += n_nodes
    n_cells = int(lines[pos].split()[1])
    pos += 1
    cells = np.array(
        [[int(v) for v in lines[pos + i].split()] for i in range(n_cells)], dtype=np.intp
    ).reshape(n_cells, -1)
    pos += n_cells
    n_regions = int(lines[pos].split()[1])
    pos += 1
    regions = []
    for i in range(n_regions):
        toks = lines[pos + i].split()
        kind, mid = toks[0], toks[1]
        k = 2
        nb = int(toks[k]); k += 1
        bounds = tuple(float(toks[k + j]) for j in range(nb)); k += nb
        n_poly = int(toks[k]); k += 1
        poly = None
        if n_poly:
            poly = np.array([float(v) for v in toks[k : k + 2 * n_poly]]).reshape(n_poly, 2)
            k += 2 * n_poly
        ns = int(toks[k]); k += 1
        sensors = np.array([int(v) for v in toks[k : k + ns]], dtype=np.intp)
        regions.append(NoeRegion(kind, bounds, sensors, mid, polygon=poly))
    pos += n_regions
    n_tags = int(lines[pos].split()[1])
    pos += 1
    tags = {}
    for i in range(n_tags):
        toks = lines[pos + i].split()
        tags[tuple(int(v) for v in toks[:-1])] = toks[-1]
    return Mesh(dim, nodes, cells, regions, tags).validate()
