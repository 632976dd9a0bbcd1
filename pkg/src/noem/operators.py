"""DeepONet / MIONet forward models and the hard-constraint wrapper.

A model holds one branch network per input function (MLP or CNN) and a
single trunk network; the forward value is the product of branch features
contracted with trunk features plus a learnable scalar bias:

    out(v_1..v_n, x) = sum_i ( prod_j b_{i,j}(v_j) ) t_i(x) + b0

With one branch this is the plain DeepONet.  Branch inputs are
standardized by dataset statistics stored inside the model; trunk inputs
are affinely mapped from the model's reference domain onto [-1, 1]^d.

The hard-constraint wrapper post-composes a model as
``alpha(x) * inner(x) + p(x)`` where ``alpha`` vanishes on the subdomain
boundary and ``p`` is the piecewise-linear interpolant (on an internal
mesh whose boundary nodes coincide with the sensors) of the boundary data
and of auxiliary interior values, so boundary sensors are matched exactly
for any inner weights.
"""

from __future__ import annotations

import json

import numpy as np

from . import tensor as T
from .mesh import (
    MeshError,
    Mesh,
    build_interval_mesh,
    build_structured_mesh_2d,
    distance_to_polygon,
    triangulate_annulus,
)

MODEL_FORMAT_VERSION = 1


class OperatorError(ValueError):
    pass


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Mlp:
    """Fully-connected tanh network; the last layer is linear."""

    def __init__(self, sizes, rng):
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(sizes, sizes[1:]):
            self.weights.append(T.Tensor(_glorot(rng, n_in, n_out, (n_in, n_out)), requires_grad=True))
            self.biases.append(T.Tensor(np.zeros(n_out), requires_grad=True))

    def forward(self, x):
        h = x if isinstance(x, T.Tensor) else T.Tensor(x)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = T.add(T.matmul(h, w), b)
            if i < len(self.weights) - 1:
                h = T.tanh(h)
        return h

    def forward_plain_with_tangents(self, x, tangents):
        """Numpy-only forward returning values and directional derivatives
        of the output w.r.t. the input, one per seed in ``tangents``."""
        h = np.asarray(x, dtype=float)
        dh = [np.broadcast_to(t, h.shape).astype(float) for t in tangents]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wv, bv = w.value(), b.value()
            h = h @ wv + bv
            dh = [d @ wv for d in dh]
            if i < len(self.weights) - 1:
                h = np.tanh(h)
                s = 1.0 - h * h
                dh = [s * d for d in dh]
        return h, dh

    def parameters(self):
        return self.weights + self.biases

    def arrays(self, prefix):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w.value()
            out[f"{prefix}b{i}"] = b.value()
        return out

    def load_arrays(self, prefix, arrays):
        for i in range(len(self.weights)):
            self.weights[i] = T.Tensor(arrays[f"{prefix}w{i}"], requires_grad=True)
            self.biases[i] = T.Tensor(arrays[f"{prefix}b{i}"], requires_grad=True)


class Cnn:
    """Two 5x5 stride-2 tanh conv layers followed by two dense layers."""

    KERNEL = 5
    STRIDE = 2

    def __init__(self, input_shape, channels, fc_hidden, latent, rng):
        self.input_shape = tuple(input_shape)
        self.channels = list(channels)
        h, w = input_shape
        chans = [1] + self.channels
        self.conv_w = []
        self.conv_b = []
        for c_in, c_out in zip(chans, chans[1:]):
            fan_in = c_in * self.KERNEL**2
            self.conv_w.append(
                T.Tensor(_glorot(rng, fan_in, c_out, (c_out, c_in, self.KERNEL, self.KERNEL)), requires_grad=True)
            )
            self.conv_b.append(T.Tensor(np.zeros(c_out), requires_grad=True))
            h = (h - self.KERNEL) // self.STRIDE + 1
            w = (w - self.KERNEL) // self.STRIDE + 1
            if h < 1 or w < 1:
                raise OperatorError(f"input shape {input_shape} too small for the conv stack")
        flat = self.channels[-1] * h * w
        self.fc = Mlp([flat, fc_hidden, latent], rng)
        self._flat = flat

    def forward(self, x):
        h = x if isinstance(x, T.Tensor) else T.Tensor(x)
        n = h.shape[0]
        h = T.reshape(h, (n, 1) + self.input_shape)
        for w, b in zip(self.conv_w, self.conv_b):
            h = T.conv2d(h, w, stride=self.STRIDE)
            h = T.tanh(T.add(h, T.reshape(b, (1, b.shape[0], 1, 1))))
        h = T.reshape(h, (n, self._flat))
        return self.fc.forward(h)

    def parameters(self):
        return self.conv_w + self.conv_b + self.fc.parameters()

    def arrays(self, prefix):
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"{prefix}cw{i}"] = w.value()
            out[f"{prefix}cb{i}"] = b.value()
        out.update(self.fc.arrays(prefix + "fc_"))
        return out

    def load_arrays(self, prefix, arrays):
        for i in range(len(self.conv_w)):
            self.conv_w[i] = T.Tensor(arrays[f"{prefix}cw{i}"], requires_grad=True)
            self.conv_b[i] = T.Tensor(arrays[f"{prefix}cb{i}"], requires_grad=True)
        self.fc.load_arrays(prefix + "fc_", arrays)


class NeuralOperatorModel:
    """Branch-trunk neural operator on a fixed reference subdomain.

    ``branch_specs``: one dict per input function, either
    ``{"kind": "mlp", "shape": [n_sensors], "hidden": [...]}`` or
    ``{"kind": "cnn", "shape": [H, W], "channels": [...], "fc_hidden": int}``.
    ``domain``: ((lo,...), (hi,...)) bounds of the reference subdomain.
    """

    def __init__(self, branch_specs, trunk_hidden, latent, domain, seed=0):
        self.branch_specs = [dict(s) for s in branch_specs]
        self.trunk_hidden = list(trunk_hidden)
        self.latent = int(latent)
        self.domain = (tuple(map(float, domain[0])), tuple(map(float, domain[1])))
        self.seed = int(seed)
        self.dim = len(self.domain[0])
        rng = np.random.default_rng(seed)
        self.branches = []
        for spec in self.branch_specs:
            if spec["kind"] == "mlp":
                self.branches.append(Mlp([int(np.prod(spec["shape"]))] + list(spec["hidden"]) + [latent], rng))
            elif spec["kind"] == "cnn":
                self.branches.append(
                    Cnn(spec["shape"], spec.get("channels", [16, 16]), spec.get("fc_hidden", 64), latent, rng)
                )
            else:
                raise OperatorError(f"unknown branch kind {spec['kind']!r}")
        self.trunk = Mlp([self.dim] + self.trunk_hidden + [latent], rng)
        self.b0 = T.Tensor(np.zeros((1, 1)), requires_grad=True)
        self.norm_mean = [np.zeros(spec["shape"]) for spec in self.branch_specs]
        self.norm_std = [np.ones(spec["shape"]) for spec in self.branch_specs]
        self.training_snapshot = None

    # -- plumbing -----------------------------------------------------------

    @property
    def kind(self):
        return "deeponet" if len(self.branches) == 1 else "mionet"

    @property
    def input_spec(self):
        return [tuple(s["shape"]) for s in self.branch_specs]

    def parameters(self):
        params = [self.b0]
        for b in self.branches:
            params.extend(b.parameters())
        params.extend(self.trunk.parameters())
        return params

    def set_normalization(self, means, stds):
        for j, (m, s) in enumerate(zip(means, stds)):
            self.norm_mean[j] = np.asarray(m, dtype=float)
            self.norm_std[j] = np.maximum(np.asarray(s, dtype=float), 1e-12)

    def _check_branch_inputs(self, branch_inputs):
        if len(branch_inputs) != len(self.branches):
            raise OperatorError(
                f"expected {len(self.branches)} branch inputs, got {len(branch_inputs)}"
            )
        for j, (v, spec) in enumerate(zip(branch_inputs, self.branch_specs)):
            shape = v.shape[1:]
            if tuple(shape) != tuple(spec["shape"]):
                raise OperatorError(
                    f"branch {j} expects input shape {tuple(spec['shape'])}, got {tuple(shape)}"
                )

    def _normalized(self, v, j):
        if isinstance(v, T.Tensor):
            return T.mul(T.sub(v, T.Tensor(self.norm_mean[j])), T.Tensor(1.0 / self.norm_std[j]))
        return T.Tensor((np.asarray(v, dtype=float) - self.norm_mean[j]) / self.norm_std[j])

    def _scaled_points(self, x):
        lo = np.asarray(self.domain[0])
        hi = np.asarray(self.domain[1])
        center = 0.5 * (lo + hi)
        inv_half = 2.0 / np.maximum(hi - lo, 1e-12)
        if isinstance(x, T.Tensor):
            return T.mul(T.sub(x, T.Tensor(center)), T.Tensor(inv_half))
        return T.Tensor((np.atleast_2d(np.asarray(x, dtype=float)) - center) * inv_half)

    # -- forward ------------------------------------------------------------

    def branch_features(self, branch_inputs):
        self._check_branch_inputs(branch_inputs)
        feats = None
        for j, v in enumerate(branch_inputs):
            out = self.branches[j].forward(self._normalized(v, j))
            feats = out if feats is None else T.mul(feats, out)
        return feats

    def trunk_features(self, x):
        return self.trunk.forward(self._scaled_points(x))

    def forward(self, branch_inputs, x):
        """Values at each (sample, point) pair: (N, P) tensor."""
        feats = self.branch_features(branch_inputs)
        tr = self.trunk_features(x)
        return T.add(T.matmul(feats, T.transpose(tr)), self.b0)

    def trunk_features_with_grads(self, pts):
        """Plain trunk features (P, m) and their spatial gradients, one
        (P, m) array per dimension; used when the points are fixed."""
        lo = np.asarray(self.domain[0])
        hi = np.asarray(self.domain[1])
        center = 0.5 * (lo + hi)
        inv_half = 2.0 / np.maximum(hi - lo, 1e-12)
        scaled = (np.atleast_2d(pts) - center) * inv_half
        seeds = []
        for d in range(self.dim):
            e = np.zeros((1, self.dim))
            e[0, d] = inv_half[d]  # chain rule through the affine map
            seeds.append(e)
        feats, dfeats = self.trunk.forward_plain_with_tangents(scaled, seeds)
        return feats, dfeats

    # -- persistence ----------------------------------------------------------

    def header(self):
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "branches": self.branch_specs,
            "trunk_hidden": self.trunk_hidden,
            "latent": self.latent,
            "domain": [list(self.domain[0]), list(self.domain[1])],
            "seed": self.seed,
            "training": self.training_snapshot,
        }

    def arrays(self, prefix=""):
        out = {prefix + "b0": self.b0.value()}
        for j, b in enumerate(self.branches):
            out.update(b.arrays(f"{prefix}branch{j}_"))
            out[f"{prefix}norm{j}_mean"] = self.norm_mean[j]
            out[f"{prefix}norm{j}_std"] = self.norm_std[j]
        out.update(self.trunk.arrays(prefix + "trunk_"))
        return out

    @classmethod
    def from_header(cls, header, arrays, prefix=""):
        model = cls(
            header["branches"],
            header["trunk_hidden"],
            header["latent"],
            header["domain"],
            seed=header["seed"],
        )
        model.training_snapshot = header.get("training")
        model.b0 = T.Tensor(arrays[prefix + "b0"], requires_grad=True)
        for j, b in enumerate(model.branches):
            b.load_arrays(f"{prefix}branch{j}_", arrays)
            model.norm_mean[j] = arrays[f"{prefix}norm{j}_mean"]
            model.norm_std[j] = arrays[f"{prefix}norm{j}_std"]
        model.trunk.load_arrays(prefix + "trunk_", arrays)
        return model

    def get_weights(self):
        return [p.value().copy() for p in self.parameters()]

    def set_weights(self, weights):
        for p, w in zip(self.parameters(), weights):
            p.data = w.copy()


# ---------------------------------------------------------------------------
# hard-constraint wrapper


def _alpha_interval(bounds):
    a, b = bounds
    scale = 1.0 / ((b - a) / 2.0) ** 2

    def alpha(pts):
        x = np.atleast_2d(pts)[:, 0]
        return (x - a) * (b - x) * scale

    def alpha_grad(pts):
        x = np.atleast_2d(pts)[:, 0]
        return ((a + b - 2.0 * x) * scale)[:, None]

    return alpha, alpha_grad


def _alpha_box(bounds, polygon=None):
    x0, y0, x1, y1 = bounds
    scale = 1.0 / ((x1 - x0) ** 2 * (y1 - y0) ** 2)
    if polygon is not None:
        center = polygon.mean(axis=0)
        r_in = float(np.min(distance_to_polygon(center[None, :], polygon)[0]))

    def parts(pts):
        p = np.atleast_2d(pts)
        gx = (p[:, 0] - x0) * (x1 - p[:, 0])
        gy = (p[:, 1] - y0) * (y1 - p[:, 1])
        dgx = x0 + x1 - 2.0 * p[:, 0]
        dgy = y0 + y1 - 2.0 * p[:, 1]
        return gx, gy, dgx, dgy

    def alpha(pts):
        gx, gy, _, _ = parts(pts)
        a = gx * gy * scale
        if polygon is not None:
            dist, _ = distance_to_polygon(np.atleast_2d(pts), polygon)
            a = a * dist / r_in
        return a

    def alpha_grad(pts):
        gx, gy, dgx, dgy = parts(pts)
        grad = np.column_stack([dgx * gy, gx * dgy]) * scale
        if polygon is not None:
            dist, direction = distance_to_polygon(np.atleast_2d(pts), polygon)
            box = gx * gy * scale
            grad = grad * (dist / r_in)[:, None] + (box / r_in)[:, None] * direction
        return grad

    return alpha, alpha_grad


def region_alpha(kind, bounds, polygon=None):
    """Boundary-vanishing weight function and its gradient for a region."""
    if kind == "interval":
        return _alpha_interval(bounds)
    if kind in ("box", "box_minus_polygon"):
        return _alpha_box(bounds, polygon if kind == "box_minus_polygon" else None)
    raise OperatorError(f"no alpha construction for region kind {kind!r}")


def _interp_mesh_for_region(kind, bounds, polygon, sensor_coords, interior_resolution):
    """Internal mesh with boundary nodes aligned to the sensors."""
    if kind == "interval":
        a, b = bounds
        n = max(2, int(interior_resolution))
        m = build_interval_mesh([a, b], [], [n])
        return m
    x0, y0, x1, y1 = bounds
    n_side = len(sensor_coords) // 4
    h = (x1 - x0) / n_side
    if kind == "box":
        return build_structured_mesh_2d(bounds, h, [])
    n_poly = None
    # recover the polygon vertex count from the stored polygon
    n_poly = len(polygon)
    center = polygon.mean(axis=0)
    radius = float(np.linalg.norm(polygon[0] - center))
    return triangulate_annulus(bounds, (center, radius), n_polygon=n_poly, outer_refine=n_side)


class HardConstraintWrapper:
    """alpha * inner + boundary interpolant; exact at every sensor."""

    def __init__(self, inner, region_kind, bounds, sensor_coords, polygon=None,
                 auxiliary=None, interior_resolution=16):
        self.inner = inner
        self.region_kind = region_kind
        self.bounds = tuple(map(float, bounds))
        self.polygon = None if polygon is None else np.asarray(polygon, dtype=float)
        self.sensor_coords = np.atleast_2d(np.asarray(sensor_coords, dtype=float))
        self.auxiliary = auxiliary
        self.interior_resolution = int(interior_resolution)
        n_sensors = len(self.sensor_coords)
        if inner.input_spec[0] != (n_sensors,):
            raise OperatorError(
                f"inner model expects {inner.input_spec[0][0]} sensors, layout has {n_sensors}"
            )
        if auxiliary is not None and auxiliary.input_spec != inner.input_spec:
            raise OperatorError("auxiliary model input spec does not match the inner model")
        self.alpha, self.alpha_grad = region_alpha(region_kind, self.bounds, self.polygon)
        self.hmesh = _interp_mesh_for_region(
            region_kind, self.bounds, self.polygon, self.sensor_coords, interior_resolution
        )
        self._match_boundary_nodes()

    def _match_boundary_nodes(self):
        nodes = self.hmesh.nodes
        boundary_ids = []
        for s in self.sensor_coords:
            d = np.linalg.norm(nodes - s, axis=1)
            i = int(np.argmin(d))
            if d[i] > 1e-9:
                raise OperatorError(
                    f"sensor at {tuple(s)} has no matching interpolation-mesh boundary node"
                )
            boundary_ids.append(i)
        self.boundary_ids = np.array(boundary_ids, dtype=np.intp)
        mask = np.ones(self.hmesh.n_nodes, dtype=bool)
        mask[self.boundary_ids] = False
        # any remaining boundary nodes of the interpolation mesh that are not
        # sensors (e.g. hole-polygon nodes) count as interior unknowns
        self.interior_ids = np.nonzero(mask)[0]
        self.interior_points = nodes[self.interior_ids]
        # column order of the nodal vector: sensors first, then interior
        self.node_order = np.concatenate([self.boundary_ids, self.interior_ids])
        self._order_inverse = np.empty(self.hmesh.n_nodes, dtype=np.intp)
        self._order_inverse[self.node_order] = np.arange(self.hmesh.n_nodes)

    # -- interpolation weights -------------------------------------------------

    def interp_matrices(self, pts):
        """(W_val, [W_grad_d]) with columns ordered (sensors, interior)."""
        from .fem import _Locator

        loc = getattr(self, "_hloc", None)
        if loc is None:
            loc = self._hloc = _Locator(self.hmesh)
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        cells, bary = loc.locate(pts)
        if np.any(cells < 0):
            bad = pts[cells < 0][0]
            raise OperatorError(f"point {tuple(bad)} is outside the wrapped subdomain")
        n_nodes = self.hmesh.n_nodes
        W = np.zeros((len(pts), n_nodes))
        rows = np.arange(len(pts))
        cell_nodes = self.hmesh.fe_cells[cells]
        for k in range(cell_nodes.shape[1]):
            W[rows, cell_nodes[:, k]] += bary[:, k]
        grads = []
        if self.hmesh.dimension == 1:
            x = self.hmesh.nodes[cell_nodes, 0]
            h = x[:, 1] - x[:, 0]
            Wg = np.zeros((len(pts), n_nodes))
            Wg[rows, cell_nodes[:, 0]] += -1.0 / h
            Wg[rows, cell_nodes[:, 1]] += 1.0 / h
            grads.append(Wg)
        else:
            from .fem import _triangle_geometry

            _, b, _ = _triangle_geometry(self.hmesh)
            for d in range(2):
                Wg = np.zeros((len(pts), n_nodes))
                for k in range(3):
                    Wg[rows, cell_nodes[:, k]] += b[cells, d, k]
                grads.append(Wg)
        order = self.node_order
        return W[:, order], [g[:, order] for g in grads]

    # -- model-like interface ----------------------------------------------------

    @property
    def kind(self):
        return "hard_constraint"

    @property
    def input_spec(self):
        return self.inner.input_spec

    @property
    def domain(self):
        return self.inner.domain

    @property
    def latent(self):
        return self.inner.latent

    def parameters(self):
        return self.inner.parameters()  # the auxiliary model stays frozen

    def interior_values(self, branch_inputs):
        """Interior nodal values N(g): auxiliary prediction or zeros."""
        g = branch_inputs[0]
        n_samples = g.shape[0]
        n_int = len(self.interior_ids)
        if n_int == 0:
            return T.Tensor(np.zeros((n_samples, 0)))
        if self.auxiliary is None:
            return T.Tensor(np.zeros((n_samples, n_int)))
        return self.auxiliary.forward(branch_inputs, self.interior_points)

    def forward(self, branch_inputs, x):
        pts = x.value() if isinstance(x, T.Tensor) else np.atleast_2d(np.asarray(x, dtype=float))
        W, _ = self.interp_matrices(pts)
        a_row = self.alpha(pts)[None, :]
        inner_out = self.inner.forward(branch_inputs, pts)
        g = branch_inputs[0]
        gt = g if isinstance(g, T.Tensor) else T.Tensor(np.asarray(g, dtype=float))
        nodal = T.concat([gt, self.interior_values(branch_inputs)], axis=1)
        pg = T.matmul(nodal, T.Tensor(W.T))
        return T.add(T.mul(inner_out, T.Tensor(a_row)), pg)

    def get_weights(self):
        return self.inner.get_weights()

    def set_weights(self, weights):
        self.inner.set_weights(weights)

    def header(self):
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": "hard_constraint",
            "region_kind": self.region_kind,
            "bounds": list(self.bounds),
            "interior_resolution": self.interior_resolution,
            "has_polygon": self.polygon is not None,
            "has_auxiliary": self.auxiliary is not None,
            "inner": self.inner.header(),
            "auxiliary": None if self.auxiliary is None else self.auxiliary.header(),
        }

    def arrays(self, prefix=""):
        out = self.inner.arrays(prefix + "inner_")
        if self.auxiliary is not None:
            out.update(self.auxiliary.arrays(prefix + "aux_"))
        out[prefix + "sensor_coords"] = self.sensor_coords
        if self.polygon is not None:
            out[prefix + "polygon"] = self.polygon
        return out


def wrap_hard_constraint(inner, region, sensor_coords, auxiliary_mode="zero",
                         interior_resolution=16):
    """Wrap ``inner`` so boundary sensor values are reproduced exactly.

    ``region``: a NoeRegion-like object with kind/bounds/polygon.
    ``auxiliary_mode``: ``"zero"`` or a trained soft-constraint model used
    to fill the interior interpolation nodes.
    """
    aux = None if auxiliary_mode == "zero" else auxiliary_mode
    return HardConstraintWrapper(
        inner,
        region.kind,
        region.bounds,
        sensor_coords,
        polygon=getattr(region, "polygon", None),
        auxiliary=aux,
        interior_resolution=interior_resolution,
    )


# ---------------------------------------------------------------------------
# persistence


def save_model(model, path):
    header = json.dumps(model.header())
    np.savez(path, __header__=np.frombuffer(header.encode(), dtype=np.uint8), **model.arrays())


def load_model(path):
    try:
        data = np.load(path)
    except Exception as exc:
        raise OperatorError(f"cannot read model file {path}: {exc}") from exc
    if "__header__" not in data:
        raise OperatorError(f"{path} is not a model file (missing header)")
    header = json.loads(bytes(data["__header__"]).decode())
    version = header.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise OperatorError(
            f"model format version {version} not supported (expected {MODEL_FORMAT_VERSION})"
        )
    arrays = {k: data[k] for k in data.files if k != "__header__"}
    if header["kind"] in ("deeponet", "mionet"):
        return NeuralOperatorModel.from_header(header, arrays)
    if header["kind"] == "hard_constraint":
        inner = NeuralOperatorModel.from_header(header["inner"], arrays, prefix="inner_")
        aux = None
        if header["has_auxiliary"]:
            aux = NeuralOperatorModel.from_header(header["auxiliary"], arrays, prefix="aux_")
        return HardConstraintWrapper(
            inner,
            header["region_kind"],
            header["bounds"],
            arrays["sensor_coords"],
            polygon=arrays.get("polygon"),
            auxiliary=aux,
            interior_resolution=header["interior_resolution"],
        )
    raise OperatorError(f"unknown model kind {header['kind']!r}")
