"""Hybrid energy assembly over FE cells and NOE subdomains, plus the
damped Newton loop that minimizes the global energy.

Per NOE binding, the trunk features (and their spatial gradients) at the
fixed quadrature points do not depend on the boundary coefficients, so
they are precomputed once; each energy evaluation then tapes only the
boundary branch (and auxiliary branch for hard-constraint wrappers), which
keeps gradients and finite-difference Hessians cheap.

Newton direction sign: the update is ``c <- c - (K + lambda I)^{-1} G``,
the standard minimization step.  A Levenberg-Marquardt shift ``lambda`` is
raised whenever a step fails to decrease the energy (the NOE terms make
the functional nonconvex), and relaxed after each accepted step; the
undamped step is always attempted first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import tensor as T
from .fem import Field, PdeError, assemble_fe, dirichlet_constraints
from .mesh import Mesh, build_dof_map, points_in_convex_polygon
from .operators import HardConstraintWrapper
from .quadrature import region_quadrature


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# bindings and frozen evaluation plans


@dataclass
class NoeBinding:
    """One NOE region bound to a trained operator.

    ``extra_branch_values``: fixed inputs for branches beyond the boundary
    branch (coefficient samples, shape parameters), one array per extra
    branch, shaped like a single sample.  ``offset`` translates region
    coordinates into the model's reference-domain coordinates.
    """

    region: object
    model: object
    quad_points: np.ndarray
    quad_weights: np.ndarray
    pde: object
    extra_branch_values: list = field(default_factory=list)
    offset: np.ndarray = None
    beta_indices: np.ndarray = None
    _plan: object = None

    def plan(self):
        if self._plan is None:
            self._plan = _FrozenPlan(self)
        return self._plan

    def sensor_count(self):
        return len(self.beta_indices)


def make_bindings(mesh, models, pde, quadrature_config=None, extra_inputs=None):
    """Bind every NOE region of ``mesh`` to its trained model.

    ``models``: dict model_id -> model.  ``extra_inputs``: optional dict
    model_id -> (list of arrays | callable(region) -> list of arrays).
    ``quadrature_config``: dict model_id -> kwargs for region_quadrature.
    """
    bindings = []
    quadrature_config = quadrature_config or {}
    extra_inputs = extra_inputs or {}
    for region in mesh.noe_subdomains:
        if region.model_id not in models:
            raise SolverError(f"no model bound for region model_id {region.model_id!r}")
        model = models[region.model_id]
        n_sensors = len(region.sensor_nodes)
        expected = model.input_spec[0]
        if expected != (n_sensors,):
            raise SolverError(
                f"model {region.model_id!r} expects {expected[0]} sensors but region"
                f" has {n_sensors}"
            )
        qcfg = dict(quadrature_config.get(region.model_id, {}))
        if region.kind == "box_minus_polygon" and isinstance(model, HardConstraintWrapper):
            # integrate on the wrapper's own triangulation so the rule is
            # aligned with the interpolant's cells
            qcfg.setdefault("triangulation_mesh", _shifted_mesh(model.hmesh, region, model))
        pts, wts = region_quadrature(region, **qcfg)
        measure = region.measure()
        if abs(wts.sum() - measure) > 1e-12 * max(measure, 1.0):
            raise SolverError(
                f"quadrature weights sum {wts.sum()!r} != region measure {measure!r}"
            )
        extra = extra_inputs.get(region.model_id, [])
        if callable(extra):
            extra = extra(region)
        lo_region = np.array(_region_lo(region))
        lo_model = np.array(model.domain[0])
        offset = lo_region - lo_model
        bindings.append(
            NoeBinding(
                region=region,
                model=model,
                quad_points=pts,
                quad_weights=wts,
                pde=pde,
                extra_branch_values=[np.asarray(v, dtype=float) for v in extra],
                offset=offset,
                beta_indices=np.asarray(region.sensor_nodes, dtype=np.intp),
            )
        )
    return bindings


def _region_lo(region):
    if region.kind == "interval":
        return (region.bounds[0],)
    return (region.bounds[0], region.bounds[1])


def _shifted_mesh(hmesh, region, model):
    lo_region = np.array(_region_lo(region))
    lo_model = np.array(model.domain[0])
    shift = lo_region - lo_model
    if np.allclose(shift, 0.0):
        return hmesh
    return Mesh(hmesh.dimension, hmesh.nodes + shift, hmesh.fe_cells)


class _FrozenPlan:
    """Taped beta -> (values, spatial gradients) at fixed quadrature points."""

    def __init__(self, binding):
        self.binding = binding
        model = binding.model
        self.local_pts = binding.quad_points - binding.offset
        if isinstance(model, HardConstraintWrapper):
            self.wrapper = model
            self.inner = _PlainModelPlan(model.inner, binding.extra_branch_values, self.local_pts)
            self.alpha_row = model.alpha(self.local_pts)[None, :]
            grads = model.alpha_grad(self.local_pts)
            self.dalpha_rows = [grads[:, d][None, :] for d in range(grads.shape[1])]
            W, Wg = model.interp_matrices(self.local_pts)
            self.W_t = T.Tensor(W.T)
            self.Wg_t = [T.Tensor(g.T) for g in Wg]
            if model.auxiliary is not None and len(model.interior_ids):
                self.aux = _PlainModelPlan(
                    model.auxiliary, binding.extra_branch_values, model.interior_points
                )
            else:
                self.aux = None
            self.n_interior = len(model.interior_ids)
        else:
            self.wrapper = None
            self.inner = _PlainModelPlan(model, binding.extra_branch_values, self.local_pts)

    def eval(self, beta_t):
        """beta_t: (B, n_sensors) Tensor; returns (u, [du_d]) tensors (B, S)."""
        u_in, du_in = self.inner.eval(beta_t)
        if self.wrapper is None:
            return u_in, du_in
        if self.aux is not None:
            interior, _ = self.aux.eval(beta_t)
        elif self.n_interior:
            interior = T.Tensor(np.zeros((beta_t.shape[0], self.n_interior)))
        else:
            interior = None
        nodal = beta_t if interior is None else T.concat([beta_t, interior], axis=1)
        a_row = T.Tensor(self.alpha_row)
        u = T.add(T.mul(u_in, a_row), T.matmul(nodal, self.W_t))
        dus = []
        for d in range(len(du_in)):
            term = T.add(
                T.add(T.mul(u_in, T.Tensor(self.dalpha_rows[d])), T.mul(du_in[d], a_row)),
                T.matmul(nodal, self.Wg_t[d]),
            )
            dus.append(term)
        return u, dus


class _PlainModelPlan:
    """Branch-trunk model with frozen extra branches and frozen trunk."""

    def __init__(self, model, extra_values, local_pts):
        self.model = model
        trunk, dtrunk = model.trunk_features_with_grads(local_pts)
        self.trunk_t = T.Tensor(trunk.T)
        self.dtrunk_t = [T.Tensor(d.T) for d in dtrunk]
        fixed = None
        for j, v in enumerate(extra_values, start=1):
            feats = model.branches[j].forward(model._normalized(v[None, ...], j)).value()
            fixed = feats if fixed is None else fixed * feats
        self.fixed_feats = None if fixed is None else T.Tensor(fixed)

    def eval(self, beta_t):
        feats = self.model.branches[0].forward(self.model._normalized(beta_t, 0))
        if self.fixed_feats is not None:
            feats = T.mul(feats, self.fixed_feats)
        u = T.add(T.matmul(feats, self.trunk_t), self.model.b0)
        dus = [T.matmul(feats, dt) for dt in self.dtrunk_t]
        return u, dus


# ---------------------------------------------------------------------------
# NOE energy


def _frozen_coefficient(binding, beta_values):
    """Coefficient values at the quadrature points; for solution-dependent
    coefficients the current NOE prediction is frozen into the field."""
    pde = binding.pde
    if pde.nonlinearity is None:
        return pde.coefficient_at(binding.quad_points)
    u0, _ = binding.plan().eval(T.Tensor(beta_values[None, :]))
    k = np.asarray(pde.nonlinearity(u0.value()[0]), dtype=float)
    if np.any(k <= 0):
        raise SolverError("nonlinear coefficient produced non-positive values")
    return k


def _energy_terms(binding, u, dus, k_vals, f_vals):
    """Taped quadrature of the energy density, one value per batch row."""
    grad_sq = None
    for du in dus:
        term = T.mul(du, du)
        grad_sq = term if grad_sq is None else T.add(grad_sq, term)
    dens = T.sub(T.mul(T.mul(grad_sq, T.Tensor(k_vals[None, :])), 0.5),
                 T.mul(u, T.Tensor(f_vals[None, :])))
    return T.matmul(dens, T.Tensor(binding.quad_weights[:, None]))


def noe_energy(binding, beta_values, hessian_mode="fd_of_gradient", fd_step=1e-5):
    """Energy, gradient and symmetrized Hessian of one NOE w.r.t. beta.

    Values and spatial gradients at the quadrature points come from the
    binding's frozen plan (forward-mode trunk tangents); the gradient is
    reverse-mode through the tape, the Hessian either central differences
    of that gradient (evaluated as one batched tape) or exact
    forward-over-reverse composition.
    """
    beta = np.asarray(beta_values, dtype=float)
    m = beta.size
    if m != binding.sensor_count():
        raise SolverError(f"beta has {m} entries, region has {binding.sensor_count()} sensors")
    plan = binding.plan()
    k_vals = _frozen_coefficient(binding, beta)
    f_vals = binding.pde.source_at(binding.quad_points)

    try:
        bt = T.Tensor(beta[None, :], requires_grad=True)
        with T.Tape() as tape:
            u, dus = plan.eval(bt)
            j_rows = _energy_terms(binding, u, dus, k_vals, f_vals)
            total = T.tensor_sum(j_rows)
            value = float(total.value())
            grad = tape.gradients(total, [bt])[0][0].copy()
    except T.NonFiniteError as exc:
        raise SolverError(
            f"non-finite NOE output for region at {binding.region.bounds}; "
            f"beta snapshot {np.array2string(beta, precision=4)}"
        ) from exc

    if hessian_mode == "fd_of_gradient":
        steps = fd_step * (1.0 + np.abs(beta))
        batch = np.repeat(beta[None, :], 2 * m, axis=0)
        for i in range(m):
            batch[2 * i, i] += steps[i]
            batch[2 * i + 1, i] -= steps[i]
        bt = T.Tensor(batch, requires_grad=True)
        with T.Tape() as tape:
            u, dus = plan.eval(bt)
            j_rows = _energy_terms(binding, u, dus, k_vals, f_vals)
            total = T.tensor_sum(j_rows)
            g_batch = tape.gradients(total, [bt])[0]
        hess = np.empty((m, m))
        for i in range(m):
            hess[:, i] = (g_batch[2 * i] - g_batch[2 * i + 1]) / (2.0 * steps[i])
    elif hessian_mode == "forward_over_reverse":
        hess = np.empty((m, m))
        for i in range(m):
            e = np.zeros((1, m))
            e[0, i] = 1.0
            bt = T.Tensor(T.DualArray(beta[None, :], e), requires_grad=True)
            with T.Tape() as tape:
                u, dus = plan.eval(bt)
                total = T.tensor_sum(_energy_terms(binding, u, dus, k_vals, f_vals))
                g = tape.gradients(total, [bt])[0]
            hess[:, i] = g.tan[0]
    else:
        raise SolverError(f"unknown hessian mode {hessian_mode!r}")
    hess = 0.5 * (hess + hess.T)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise SolverError(f"non-finite NOE derivatives at beta {beta!r}")
    return value, grad, hess


def noe_value(binding, beta_values):
    """Energy value only (used by the damping line search)."""
    beta = np.asarray(beta_values, dtype=float)
    k_vals = _frozen_coefficient(binding, beta)
    f_vals = binding.pde.source_at(binding.quad_points)
    u, dus = binding.plan().eval(T.Tensor(beta[None, :]))
    total = T.tensor_sum(_energy_terms(binding, u, dus, k_vals, f_vals))
    return float(total.value())


# ---------------------------------------------------------------------------
# global assembly


def _check_bindings(mesh, bindings):
    bound = {id(b.region) for b in bindings}
    for region in mesh.noe_subdomains:
        if id(region) not in bound:
            raise SolverError(f"region with model_id {region.model_id!r} has no binding")
    if len(bindings) != len(mesh.noe_subdomains):
        raise SolverError("bindings do not match the mesh regions one-to-one")


def assemble_global(mesh, bindings, pde, c, dof_map, hessian_mode="fd_of_gradient"):
    """(J, G_free, K_free) of the hybrid energy at coefficients ``c``."""
    _check_bindings(mesh, bindings)
    n = mesh.n_nodes
    if np.max(np.abs(dof_map.full_vector(c[dof_map.free]) - c)) > 0:
        raise SolverError("constrained entries of c do not match their fixed values")
    J, G, (rows, cols, vals) = assemble_fe(mesh, pde, c)
    rows, cols, vals = list(rows), list(cols), list(vals)
    for binding in bindings:
        idx = binding.beta_indices
        if idx.max() >= n:
            raise SolverError("binding sensor index out of range")
        val, grad, hess = noe_energy(binding, c[idx], hessian_mode=hessian_mode)
        J += val
        G[idx] += grad
        rr, cc = np.meshgrid(idx, idx, indexing="ij")
        rows.extend(rr.ravel())
        cols.extend(cc.ravel())
        vals.extend(hess.ravel())
    K = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    free = dof_map.free
    return J, G[free], K[free][:, free]


def total_energy(mesh, bindings, pde, c):
    J, _, _ = assemble_fe(mesh, pde, c)
    for binding in bindings:
        J += noe_value(binding, c[binding.beta_indices])
    return J


# ---------------------------------------------------------------------------
# Newton loop


@dataclass
class NewtonState:
    c: np.ndarray
    energy: float
    grad_norm: float
    rel_update: float
    damping: float
    iteration: int


def default_initial_guess(mesh, bindings, pde, dof_map):
    """Linear Dirichlet interpolation in 1D, coarse patched solve in 2D."""
    c = np.zeros(mesh.n_nodes)
    c[dof_map.constrained] = dof_map.constrained_values
    if len(dof_map.constrained) == 0:
        return c
    if mesh.dimension == 1:
        xs = mesh.nodes[:, 0]
        xc = mesh.nodes[dof_map.constrained, 0]
        order = np.argsort(xc)
        c[dof_map.free] = np.interp(
            xs[dof_map.free], xc[order], dof_map.constrained_values[order]
        )
        return c
    # 2D: all-FE auxiliary problem with every NOE box replaced by two
    # corner triangles; mid-edge sensors are then read off the patch field.
    cells = [mesh.fe_cells]
    for region in mesh.noe_subdomains:
        corners = []
        x0, y0, x1, y1 = region.bounds
        for target in ((x0, y0), (x1, y0), (x1, y1), (x0, y1)):
            d = np.linalg.norm(mesh.nodes[region.sensor_nodes] - np.array(target), axis=1)
            corners.append(int(region.sensor_nodes[int(np.argmin(d))]))
        c0, c1, c2, c3 = corners
        cells.append(np.array([[c0, c1, c2], [c0, c2, c3]], dtype=np.intp))
    aux = Mesh(2, mesh.nodes, np.vstack(cells), [], dict(mesh.boundary_tags))
    try:
        from .fem import solve_reference

        aux_model = pde
        if pde.nonlinearity is not None:
            from .fem import PdeModel

            aux_model = PdeModel(
                coefficient=pde.coefficient,
                source=pde.source,
                dirichlet=pde.dirichlet,
                neumann=pde.neumann,
            )
        aux_field = solve_reference(aux, aux_model)
        return aux_field.values.copy()
    except PdeError:
        return c


def newton_solve(
    mesh,
    bindings,
    pde,
    c0=None,
    tol=1e-8,
    max_iter=50,
    damping=None,
    hessian_mode="fd_of_gradient",
):
    """Damped Newton minimization of the hybrid energy.

    Returns ``(solution, trace)`` where ``solution`` is a
    :class:`NoemSolution` (``solution.converged`` flags success) and
    ``trace`` lists per-iteration :class:`NewtonState` records.  Raises
    only on a singular shifted Hessian at maximal damping.
    """
    cfg = {"initial": 1e-6, "growth": 10.0, "shrink": 10.0, "max": 1e10}
    if damping:
        cfg.update(damping)
    constrained = dirichlet_constraints(mesh, pde)
    dof_map = build_dof_map(mesh, constrained)
    if c0 is None:
        c = default_initial_guess(mesh, bindings, pde, dof_map)
    else:
        c = np.asarray(c0, dtype=float).copy()
        mism = np.max(np.abs(c[dof_map.constrained] - dof_map.constrained_values)) if len(dof_map.constrained) else 0.0
        if mism > 1e-12:
            raise SolverError("c0 does not satisfy the Dirichlet values at constrained entries")
    free = dof_map.free
    lam = 0.0
    trace = []
    converged = False
    for iteration in range(1, max_iter + 1):
        J, G_f, K_f = assemble_global(mesh, bindings, pde, c, dof_map, hessian_mode)
        eye = sp.identity(K_f.shape[0], format="csr")
        accepted = False
        while True:
            try:
                delta = spla.spsolve((K_f + lam * eye).tocsc(), -G_f)
                solvable = np.all(np.isfinite(delta))
            except RuntimeError:
                solvable = False
            if solvable:
                c_try = c.copy()
                c_try[free] += delta
                try:
                    J_try = total_energy(mesh, bindings, pde, c_try)
                except SolverError:
                    J_try = np.inf
                if np.isfinite(J_try) and J_try <= J + 1e-12 * (1.0 + abs(J)):
                    accepted = True
                    break
            lam = cfg["initial"] if lam == 0.0 else lam * cfg["growth"]
            if lam > cfg["max"]:
                raise SolverError(
                    f"no descent step found at maximal damping {cfg['max']:.0e} "
                    f"(iteration {iteration})"
                )
        c = c_try
        rel_update = float(np.linalg.norm(delta) / max(np.linalg.norm(c), 1e-30))
        trace.append(
            NewtonState(
                c=c.copy(),
                energy=float(J_try),
                grad_norm=float(np.linalg.norm(G_f)),
                rel_update=rel_update,
                damping=lam,
                iteration=iteration,
            )
        )
        lam = 0.0 if lam <= cfg["initial"] else lam / cfg["shrink"]
        if rel_update <= tol:
            converged = True
            break
    solution = NoemSolution(mesh, bindings, pde, c, dof_map, converged)
    return solution, trace


def trace_to_text(trace):
    lines = ["iteration\tenergy\tgrad_norm\trel_update\tdamping"]
    for s in trace:
        lines.append(
            f"{s.iteration}\t{s.energy:.12e}\t{s.grad_norm:.6e}\t{s.rel_update:.6e}\t{s.damping:.3e}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# solution reconstruction


def model_forward_with_grads(model, branch_values, pts):
    """Plain-numpy model values and spatial gradients at arbitrary points.

    ``branch_values``: list of single-sample arrays (first entry: beta).
    Returns (values (P,), grads (P, d)).
    """
    if isinstance(model, HardConstraintWrapper):
        u_in, g_in = model_forward_with_grads(model.inner, branch_values, pts)
        a = model.alpha(pts)
        da = model.alpha_grad(pts)
        W, Wg = model.interp_matrices(pts)
        if model.auxiliary is not None and len(model.interior_ids):
            interior = (
                model.auxiliary.forward(
                    [v[None, ...] for v in branch_values], model.interior_points
                )
                .value()[0]
            )
        else:
            interior = np.zeros(len(model.interior_ids))
        nodal = np.concatenate([np.asarray(branch_values[0], dtype=float), interior])
        u = a * u_in + W @ nodal
        grads = np.column_stack(
            [da[:, d] * u_in + a * g_in[:, d] + Wg[d] @ nodal for d in range(da.shape[1])]
        )
        return u, grads
    feats = None
    for j, v in enumerate(branch_values):
        out = model.branches[j].forward(model._normalized(np.asarray(v)[None, ...], j)).value()
        feats = out if feats is None else feats * out
    trunk, dtrunk = model.trunk_features_with_grads(pts)
    u = (feats @ trunk.T + model.b0.value())[0]
    grads = np.column_stack([(feats @ dt.T)[0] for dt in dtrunk])
    return u, grads


def reconstruct_solution(mesh, bindings, c, points, with_derivative=False):
    """Evaluate the hybrid solution at query points.

    FE-region points evaluate the piecewise-linear field; NOE-region points
    evaluate the bound model with beta taken from ``c``.  Points on an
    interface take the FE side.  Points inside a hole are rejected.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.full(len(pts), np.nan)
    derivs = np.full((len(pts), mesh.dimension), np.nan)
    fe_field = Field(mesh, c)
    cells, bary = fe_field.locator().locate(pts)
    fe_mask = cells >= 0
    if fe_mask.any():
        idx = np.nonzero(fe_mask)[0]
        values[idx] = np.einsum(
            "pi,pi->p", c[mesh.fe_cells[cells[idx]]], bary[idx]
        )
        if with_derivative:
            derivs[idx] = fe_field.derivative(pts[idx])
    remaining = ~fe_mask
    for binding in bindings:
        if not remaining.any():
            break
        inside = binding.region.contains(pts, include_boundary=True) & remaining
        if binding.region.kind == "box_minus_polygon":
            in_hole = (
                points_in_convex_polygon(pts, binding.region.polygon, include_boundary=False)
                & remaining
            )
            if in_hole.any():
                bad = pts[in_hole][0]
                raise SolverError(f"query point {tuple(bad)} lies inside a hole")
        if not inside.any():
            continue
        idx = np.nonzero(inside)[0]
        beta = c[binding.beta_indices]
        local = pts[idx] - binding.offset
        u, g = model_forward_with_grads(
            binding.model, [beta, *binding.extra_branch_values], local
        )
        values[idx] = u
        if with_derivative:
            derivs[idx] = g
        remaining[idx] = False
    if np.isnan(values).any():
        bad = pts[np.nonzero(np.isnan(values))[0][0]]
        raise SolverError(f"query point {tuple(bad)} is outside the computational domain")
    if with_derivative:
        return values, derivs
    return values


class NoemSolution:
    """Converged (or flagged) hybrid solution with point evaluation."""

    def __init__(self, mesh, bindings, pde, c, dof_map, converged):
        self.mesh = mesh
        self.bindings = bindings
        self.pde = pde
        self.c = c
        self.dof_map = dof_map
        self.converged = converged

    def evaluate(self, points):
        return reconstruct_solution(self.mesh, self.bindings, self.c, points)

    def derivative(self, points):
        _, g = reconstruct_solution(
            self.mesh, self.bindings, self.c, points, with_derivative=True
        )
        return g

    def __call__(self, points):
        return self.evaluate(points)
