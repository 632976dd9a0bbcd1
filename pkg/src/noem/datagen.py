"""Subdomain training-set generation: draw inputs, solve, record, persist."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import Field, assemble_fe, dirichlet_constraints, solve_reference
from .mesh import build_dof_map

DATASET_FORMAT_VERSION = 1
log = logging.getLogger(__name__)


class DatagenError(RuntimeError):
    pass


@dataclass
class Dataset:
    """Aligned per-sample branch inputs and solution values on one grid."""

    branch_inputs: list
    grid: np.ndarray
    outputs: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return len(self.outputs)

    def subset(self, idx):
        return Dataset(
            [v[idx] for v in self.branch_inputs], self.grid, self.outputs[idx], dict(self.metadata)
        )


@dataclass
class SubdomainSpec:
    """One subdomain training problem.

    ``mesh_factory(resolution)`` builds the all-FE fine mesh;
    ``model_factory(inputs, mesh)`` builds the PDE model for one sample's
    drawn ``inputs`` dict; ``draw(rng)`` draws that dict; ``branch_keys``
    name the inputs (in order) that become neural-operator branch inputs.
    ``constant_operator`` marks problems whose stiffness does not depend on
    the drawn inputs, enabling a shared factorization.
    """

    mesh_factory: object
    model_factory: object
    draw: object
    branch_keys: list
    description: str = ""
    constant_operator: bool = False
    output_grid: object = None  # optional callable mesh -> (P, d) points


def _default_output_grid(mesh, cap, seed):
    nodes = mesh.nodes
    if len(nodes) <= cap:
        return nodes.copy()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0DD]))
    idx = np.sort(rng.choice(len(nodes), size=cap, replace=False))
    return nodes[idx].copy()


class _SharedOperatorSolver:
    """Reusable factorization for fixed-stiffness subdomain problems."""

    def __init__(self, mesh, model):
        self.mesh = mesh
        self.model = model
        constrained = dirichlet_constraints(mesh, model)
        self.dof_map = build_dof_map(mesh, constrained)
        values = np.zeros(mesh.n_nodes)
        _, _, (rows, cols, vals) = assemble_fe(mesh, model, values)
        K = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()
        free = self.dof_map.free
        self.factor = spla.splu(K[free][:, free].tocsc())

    def solve(self, model):
        constrained = dirichlet_constraints(self.mesh, model)
        values = np.zeros(self.mesh.n_nodes)
        for node, val in constrained.items():
            values[node] = val
        _, G, _ = assemble_fe(self.mesh, self.model, values)
        free = self.dof_map.free
        out = values.copy()
        out[free] += self.factor.solve(-G[free])
        return Field(self.mesh, out)


def generate_dataset(
    spec,
    n_samples,
    solver_resolution,
    seed=0,
    output_cap=400,
    threads=1,
    skip_fraction_limit=0.01,
    convergence_tolerance=2e-3,
):
    """Draw inputs, solve the subdomain PDE per sample, collect a Dataset.

    The first sample is re-solved at twice the resolution; the relative
    difference on the output grid must stay below ``convergence_tolerance``.
    Failed solves are skipped and logged; more than ``skip_fraction_limit``
    of failures rejects the whole dataset.  Per-sample seeds derive from
    (seed, index), so results do not depend on scheduling order.
    """
    if n_samples < 1:
        raise DatagenError("n_samples must be >= 1")
    mesh = spec.mesh_factory(solver_resolution)
    if spec.output_grid is not None:
        grid = np.atleast_2d(spec.output_grid(mesh))
    else:
        grid = _default_output_grid(mesh, output_cap, seed)

    shared = None
    if spec.constant_operator:
        probe = spec.model_factory(spec.draw(np.random.default_rng(0)), mesh)
        shared = _SharedOperatorSolver(mesh, probe)

    def solve_one(i, at_mesh=None, resolution=None):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        inputs = spec.draw(rng)
        use_mesh = at_mesh if at_mesh is not None else mesh
        model = spec.model_factory(inputs, use_mesh)
        if shared is not None and at_mesh is None:
            fld = shared.solve(model)
        else:
            fld = solve_reference(use_mesh, model)
        return inputs, fld.evaluate(grid)

    # convergence spot-check on the first sample
    _, coarse_vals = solve_one(0)
    fine_mesh = spec.mesh_factory(2 * solver_resolution)
    _, fine_vals = solve_one(0, at_mesh=fine_mesh, resolution=2 * solver_resolution)
    denom = max(np.linalg.norm(fine_vals), 1e-30)
    rel = np.linalg.norm(fine_vals - coarse_vals) / denom
    if rel > convergence_tolerance:
        raise DatagenError(
            f"solver_resolution={solver_resolution} too coarse: 2x refinement moves the "
            f"first sample by {rel:.2e} (limit {convergence_tolerance:.1e})"
        )

    results = [None] * n_samples
    failures = []

    def task(i):
        try:
            results[i] = solve_one(i)
        except Exception as exc:  # noqa: BLE001 - any solver failure skips the sample
            failures.append(i)
            log.warning("sample %d skipped: %s", i, exc)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(task, range(n_samples)))
    else:
        for i in range(n_samples):
            task(i)

    if len(failures) > skip_fraction_limit * n_samples:
        raise DatagenError(
            f"{len(failures)}/{n_samples} samples failed (limit {skip_fraction_limit:.0%})"
        )
    kept = [r for r in results if r is not None]
    branch_inputs = [
        np.stack([np.asarray(r[0][key], dtype=float) for r in kept]) for key in spec.branch_keys
    ]
    outputs = np.stack([r[1] for r in kept])
    if not np.all(np.isfinite(outputs)):
        raise DatagenError("non-finite solution values in the dataset")
    metadata = {
        "format_version": DATASET_FORMAT_VERSION,
        "description": spec.description,
        "seed": int(seed),
        "solver_resolution": int(solver_resolution),
        "n_requested": int(n_samples),
        "n_skipped": len(failures),
        "branch_keys": list(spec.branch_keys),
        "convergence_check": float(rel),
    }
    return Dataset(branch_inputs, grid, outputs, metadata)


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset, path):
    header = json.dumps(dataset.metadata)
    arrays = {f"branch_{i}": v for i, v in enumerate(dataset.branch_inputs)}
    np.savez(
        path,
        __header__=np.frombuffer(header.encode(), dtype=np.uint8),
        grid=dataset.grid,
        outputs=dataset.outputs,
        **arrays,
    )


def load_dataset(path):
    try:
        data = np.load(path)
    except Exception as exc:
        raise DatagenError(f"cannot read dataset file {path}: {exc}") from exc
    if "__header__" not in data:
        raise DatagenError(f"{path} is not a dataset file (missing header)")
    metadata = json.loads(bytes(data["__header__"]).decode())
    version = metadata.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise DatagenError(
            f"dataset format version {version} not supported (expected {DATASET_FORMAT_VERSION})"
        )
    branch_inputs = []
    i = 0
    while f"branch_{i}" in data:
        branch_inputs.append(data[f"branch_{i}"])
        i += 1
    return Dataset(branch_inputs, data["grid"], data["outputs"], metadata)
