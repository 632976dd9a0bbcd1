import numpy as np
import pytest

from noem import tensor as T
from noem import operators as O
from noem.mesh import NoeRegion, regular_polygon
from noem.training import TrainingConfig, TrainingError, train


def small_model(n_branches=1, sensors=2, latent=7, seed=0, dim=1, domain=None):
    if domain is None:
        domain = ([0.0] * dim, [1.0] * dim)
    specs = [{"kind": "mlp", "shape": [sensors], "hidden": [11, 11]} for _ in range(n_branches)]
    return O.NeuralOperatorModel(specs, [9, 9], latent, domain, seed=seed)


class ArrayDataset:
    def __init__(self, branch_inputs, grid, outputs):
        self.branch_inputs = branch_inputs
        self.grid = grid
        self.outputs = outputs


# -- forward -------------------------------------------------------------------


def test_zero_weights_bias_only():
    model = small_model()
    for p in model.parameters():
        p.data = np.zeros_like(p.value())
    model.b0 = T.Tensor(np.full((1, 1), 0.7), requires_grad=True)
    out = model.forward([np.array([[0.3, -0.1]])], np.linspace(0, 1, 5)[:, None])
    assert np.all(out.value() == 0.7)


def test_single_branch_mionet_equals_deeponet_bitwise():
    deeponet = small_model(n_branches=1, seed=3)
    mionet = small_model(n_branches=2, seed=3)
    # copy shared weights, then rig the second branch to output exactly ones
    for i in range(len(deeponet.branches[0].weights)):
        mionet.branches[0].weights[i] = deeponet.branches[0].weights[i]
        mionet.branches[0].biases[i] = deeponet.branches[0].biases[i]
    for i in range(len(deeponet.trunk.weights)):
        mionet.trunk.weights[i] = deeponet.trunk.weights[i]
        mionet.trunk.biases[i] = deeponet.trunk.biases[i]
    mionet.b0 = deeponet.b0
    for i, w in enumerate(mionet.branches[1].weights):
        mionet.branches[1].weights[i] = T.Tensor(np.zeros_like(w.value()), requires_grad=True)
        mionet.branches[1].biases[i] = T.Tensor(
            np.zeros_like(mionet.branches[1].biases[i].value()), requires_grad=True
        )
    last = mionet.branches[1].biases[-1]
    mionet.branches[1].biases[-1] = T.Tensor(np.ones_like(last.value()), requires_grad=True)

    v = np.array([[0.25, -0.4], [0.1, 0.9]])
    x = np.linspace(0, 1, 7)[:, None]
    a = deeponet.forward([v], x).value()
    b = mionet.forward([v, v], x).value()
    assert np.array_equal(a, b)
    assert deeponet.kind == "deeponet" and mionet.kind == "mionet"


def test_doubling_branch_features_doubles_output_minus_bias():
    model = small_model(seed=5)
    v = np.array([[0.2, 0.6]])
    x = np.linspace(0, 1, 6)[:, None]
    base = model.forward([v], x).value()
    b0 = model.b0.value()
    model.branches[0].weights[-1] = T.Tensor(2 * model.branches[0].weights[-1].value(), requires_grad=True)
    model.branches[0].biases[-1] = T.Tensor(2 * model.branches[0].biases[-1].value(), requires_grad=True)
    doubled = model.forward([v], x).value()
    assert np.allclose(doubled, 2 * (base - b0) + b0, rtol=1e-14, atol=1e-15)


def test_linear_in_trunk_features():
    model = small_model(seed=6)
    v = np.array([[0.2, 0.6]])
    x = np.linspace(0, 1, 6)[:, None]
    base = model.forward([v], x).value()
    b0 = model.b0.value()
    model.trunk.weights[-1] = T.Tensor(2 * model.trunk.weights[-1].value(), requires_grad=True)
    model.trunk.biases[-1] = T.Tensor(2 * model.trunk.biases[-1].value(), requires_grad=True)
    doubled = model.forward([v], x).value()
    assert np.allclose(doubled - b0, 2 * (base - b0), rtol=1e-13, atol=1e-15)


def test_sensor_count_mismatch_rejected():
    model = small_model(sensors=2)
    with pytest.raises(O.OperatorError, match="expect.*2.*got.*3"):
        model.forward([np.zeros((1, 3))], np.zeros((1, 1)))
    with pytest.raises(O.OperatorError, match="branch inputs"):
        model.forward([np.zeros((1, 2)), np.zeros((1, 2))], np.zeros((1, 1)))


def test_forward_differentiable_wrt_inputs_and_points():
    model = small_model(seed=7)
    v = T.Tensor(np.array([[0.2, -0.3]]), requires_grad=True)
    x = T.Tensor(np.array([[0.4]]), requires_grad=True)
    with T.Tape() as tape:
        out = T.tensor_sum(model.forward([v], x))
        gv, gx = tape.gradients(out, [v, x])
    h = 1e-6

    def f(vv, xx):
        return float(model.forward([vv], xx).value().sum())

    for i in range(2):
        vp = v.value().copy(); vp[0, i] += h
        vm = v.value().copy(); vm[0, i] -= h
        fd = (f(vp, x.value()) - f(vm, x.value())) / (2 * h)
        assert abs(gv[0, i] - fd) < 1e-6 * max(1, abs(fd))
    fd = (f(v.value(), x.value() + h) - f(v.value(), x.value() - h)) / (2 * h)
    assert abs(gx[0, 0] - fd) < 1e-6 * max(1, abs(fd))


def test_trunk_features_with_grads_match_fd():
    model = small_model(seed=8, dim=2, domain=([0, 0], [2, 1]))
    pts = np.array([[0.3, 0.7], [1.5, 0.2]])
    feats, dfeats = model.trunk_features_with_grads(pts)
    h = 1e-6
    for d in range(2):
        pp, pm = pts.copy(), pts.copy()
        pp[:, d] += h
        pm[:, d] -= h
        fd = (model.trunk_features(pp).value() - model.trunk_features(pm).value()) / (2 * h)
        assert np.allclose(dfeats[d], fd, atol=1e-6)


def test_cnn_branch_forward_shapes():
    spec = [{"kind": "cnn", "shape": [17, 17], "channels": [6, 6], "fc_hidden": 20}]
    model = O.NeuralOperatorModel(spec, [9, 9], 5, ([0, 0], [1, 1]), seed=1)
    v = np.random.default_rng(0).normal(size=(3, 17, 17))
    out = model.forward([v], np.array([[0.5, 0.5], [0.2, 0.8]]))
    assert out.shape == (3, 2)


# -- hard-constraint wrapper -----------------------------------------------------


def test_alpha_2d_center_value():
    alpha, _ = O.region_alpha("box", (0.0, 0.0, 1.0, 1.0))
    assert np.isclose(alpha(np.array([[0.5, 0.5]]))[0], 0.0625)


def test_alpha_1d_formula():
    alpha, grad = O.region_alpha("interval", (1.0, 2.0))
    assert np.isclose(alpha(np.array([[1.5]]))[0], 1.0)
    assert alpha(np.array([[1.0]]))[0] == 0.0
    assert alpha(np.array([[2.0]]))[0] == 0.0
    h = 1e-7
    fd = (alpha(np.array([[1.3 + h]]))[0] - alpha(np.array([[1.3 - h]]))[0]) / (2 * h)
    assert np.isclose(grad(np.array([[1.3]]))[0, 0], fd, atol=1e-6)


def test_alpha_polygon_vanishes_on_hole():
    poly = regular_polygon((0.8, 0.8), 0.15, 32)
    alpha, grad = O.region_alpha("box_minus_polygon", (0.4, 0.4, 1.2, 1.2), poly)
    assert abs(alpha(poly[:3])).max() < 1e-12
    assert alpha(np.array([[0.8, 0.6]]))[0] > 0
    pt = np.array([[0.95, 0.7]])
    h = 1e-6
    for d in range(2):
        pp, pm = pt.copy(), pt.copy()
        pp[0, d] += h
        pm[0, d] -= h
        fd = (alpha(pp)[0] - alpha(pm)[0]) / (2 * h)
        assert np.isclose(grad(pt)[0, d], fd, atol=1e-5)


def _wrap_1d(inner, auxiliary="zero"):
    region = NoeRegion("interval", (1.0, 2.0), np.array([0, 1]))
    return O.wrap_hard_constraint(inner, region, np.array([[1.0], [2.0]]), auxiliary)


def test_wrapper_matches_endpoints_for_random_inner():
    rng = np.random.default_rng(11)
    inner = small_model(sensors=2, seed=2, domain=([1.0], [2.0]))
    for p in inner.parameters():
        p.data = rng.normal(size=p.value().shape)
    wrapper = _wrap_1d(inner)
    g = np.array([[0.3, -0.2]])
    out = wrapper.forward([g], np.array([[1.0], [2.0]])).value()
    assert np.allclose(out, [[0.3, -0.2]], atol=1e-12)


def test_wrapper_zero_inner_interpolates_boundary_with_zero_interior():
    inner = small_model(sensors=2, seed=2, domain=([1.0], [2.0]))
    for p in inner.parameters():
        p.data = np.zeros_like(p.value())
    wrapper = _wrap_1d(inner)
    g = np.array([[0.3, -0.2]])
    xs = np.linspace(1, 2, 21)[:, None]
    out = wrapper.forward([g], xs).value()[0]
    # piecewise-linear through the boundary data and zero interior nodes
    hnodes = np.sort(wrapper.hmesh.nodes[:, 0])
    hvals = np.zeros_like(hnodes)
    hvals[0], hvals[-1] = 0.3, -0.2
    expected = np.interp(xs[:, 0], hnodes, hvals)
    assert np.allclose(out, expected, atol=1e-12)


def test_wrapper_sensor_exactness_many_random_cases():
    region = NoeRegion(
        "box", (0.0, 0.0, 1.0, 1.0), np.arange(16), polygon=None
    )
    # 16 sensors: 4 per side on a 4-cell-per-side box
    side = np.linspace(0, 1, 5)
    bottom = np.column_stack([side[:-1], np.zeros(4)])
    right = np.column_stack([np.ones(4), side[:-1]])
    top = np.column_stack([side[:0:-1], np.ones(4)])
    left = np.column_stack([np.zeros(4), side[:0:-1]])
    sensors = np.vstack([bottom, right, top, left])
    rng = np.random.default_rng(12)
    violations = []
    for trial in range(50):
        inner = O.NeuralOperatorModel(
            [{"kind": "mlp", "shape": [16], "hidden": [8]}], [8], 4, ([0, 0], [1, 1]), seed=trial
        )
        for p in inner.parameters():
            p.data = rng.normal(size=p.value().shape)
        wrapper = O.wrap_hard_constraint(inner, region, sensors)
        g = rng.normal(size=(20, 16))
        out = wrapper.forward([g], sensors).value()
        scale = np.maximum(np.abs(g), 1.0)
        violations.append(np.max(np.abs(out - g) / scale))
    assert max(violations) <= 1e-6


def test_wrapper_interface_trace_is_linear_between_sensors():
    side = np.linspace(0, 1, 5)
    bottom = np.column_stack([side[:-1], np.zeros(4)])
    right = np.column_stack([np.ones(4), side[:-1]])
    top = np.column_stack([side[:0:-1], np.ones(4)])
    left = np.column_stack([np.zeros(4), side[:0:-1]])
    sensors = np.vstack([bottom, right, top, left])
    region = NoeRegion("box", (0.0, 0.0, 1.0, 1.0), np.arange(16))
    rng = np.random.default_rng(13)
    inner = O.NeuralOperatorModel(
        [{"kind": "mlp", "shape": [16], "hidden": [8]}], [8], 4, ([0, 0], [1, 1]), seed=9
    )
    for p in inner.parameters():
        p.data = rng.normal(size=p.value().shape)
    wrapper = O.wrap_hard_constraint(inner, region, sensors)
    g = rng.normal(size=(1, 16))
    ys = np.linspace(0, 1, 100)
    pts = np.column_stack([np.ones(100), ys])  # right edge
    out = wrapper.forward([g], pts).value()[0]
    # FE trace: linear interpolation of the right-edge sensor values
    edge_y = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    edge_v = np.array([g[0, 4], g[0, 5], g[0, 6], g[0, 7], g[0, 8]])
    expected = np.interp(ys, edge_y, edge_v)
    assert np.max(np.abs(out - expected)) <= 1e-6


def test_wrapper_misaligned_sensors_rejected():
    inner = small_model(sensors=2, seed=2, domain=([1.0], [2.0]))
    region = NoeRegion("interval", (1.0, 2.0), np.array([0, 1]))
    with pytest.raises(O.OperatorError):
        O.wrap_hard_constraint(inner, region, np.array([[1.05], [2.0]]))


# -- training ---------------------------------------------------------------------


def test_train_constant_solutions():
    rng = np.random.default_rng(0)
    c = rng.uniform(-1, 1, size=(200, 1))
    branch = np.repeat(c, 2, axis=1)  # both boundary sensors equal c
    grid = np.linspace(0, 1, 9)[:, None]
    outputs = np.repeat(c, 9, axis=1)  # constant solution u == c
    model = small_model(sensors=2, seed=1)
    cfg = TrainingConfig(max_epochs=12000, patience=2000, seed=0)
    model, history = train(model, ArrayDataset([branch], grid, outputs), cfg)
    assert min(h["val_loss"] for h in history) <= 1e-6


def test_train_rejects_empty_dataset():
    model = small_model()
    with pytest.raises(O.OperatorError):
        train(model, ArrayDataset([np.zeros((0, 2))], np.zeros((3, 1)), np.zeros((0, 3))), TrainingConfig())


def test_early_stop_contract():
    # targets generated by the model itself: loss starts at its optimum, so
    # training must stop once patience epochs pass without improvement
    model = small_model(seed=4)
    rng = np.random.default_rng(1)
    branch = rng.normal(size=(40, 2))
    grid = np.linspace(0, 1, 5)[:, None]
    cfg = TrainingConfig(max_epochs=5000, patience=25, seed=0, init_bias_to_target_mean=False)
    # reproduce the trainer's split so normalization statistics match and the
    # model interpolates the dataset exactly at epoch 1
    split = np.random.default_rng(cfg.seed).permutation(40)
    train_rows = branch[split[4:]]
    model.set_normalization([train_rows.mean(axis=0)], [train_rows.std(axis=0)])
    outputs = model.forward([branch], grid).value()
    _, history = train(model, ArrayDataset([branch], grid, outputs), cfg)
    assert len(history) <= 1 + 25 + 1


def test_training_determinism():
    def run():
        model = small_model(seed=2)
        rng = np.random.default_rng(5)
        branch = rng.normal(size=(30, 2))
        grid = np.linspace(0, 1, 4)[:, None]
        outputs = np.sin(branch[:, :1]) + grid.T
        cfg = TrainingConfig(max_epochs=120, patience=119, seed=7)
        _, history = train(model, ArrayDataset([branch], grid, outputs), cfg)
        return history

    h1, h2 = run(), run()
    assert len(h1) >= 100
    assert all(
        a["train_loss"] == b["train_loss"] and a["val_loss"] == b["val_loss"]
        for a, b in zip(h1, h2)
    )


def test_invalid_config_rejected():
    with pytest.raises(TrainingError):
        TrainingConfig(learning_rate=0.0).validate()
    with pytest.raises(TrainingError):
        TrainingConfig(max_epochs=10, patience=10).validate()


# -- persistence -------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    model = small_model(n_branches=2, seed=3)
    model.set_normalization(
        [np.array([0.1, 0.2]), np.array([0.0, 0.0])], [np.array([1.0, 2.0]), np.array([1.0, 1.0])]
    )
    path = tmp_path / "model.npz"
    O.save_model(model, path)
    loaded = O.load_model(path)
    v = np.random.default_rng(3).normal(size=(4, 2))
    x = np.linspace(0, 1, 6)[:, None]
    a = model.forward([v, v], x).value()
    b = loaded.forward([v, v], x).value()
    assert np.array_equal(a, b)
    for p, q in zip(model.parameters(), loaded.parameters()):
        assert np.array_equal(p.value(), q.value())


def test_save_load_wrapper_round_trip(tmp_path):
    inner = small_model(sensors=2, seed=2, domain=([1.0], [2.0]))
    aux = small_model(sensors=2, seed=9, domain=([1.0], [2.0]))
    wrapper = _wrap_1d(inner, auxiliary=aux)
    path = tmp_path / "wrapper.npz"
    O.save_model(wrapper, path)
    loaded = O.load_model(path)
    g = np.array([[0.4, -0.1]])
    xs = np.linspace(1, 2, 13)[:, None]
    assert np.array_equal(wrapper.forward([g], xs).value(), loaded.forward([g], xs).value())


def test_load_version_mismatch(tmp_path):
    model = small_model()
    path = tmp_path / "model.npz"
    O.save_model(model, path)
    import json

    data = dict(np.load(path))
    header = json.loads(bytes(data["__header__"]).decode())
    header["format_version"] = 99
    data["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(path, **data)
    with pytest.raises(O.OperatorError, match="version"):
        O.load_model(path)


def test_load_truncated_file(tmp_path):
    path = tmp_path / "model.npz"
    path.write_bytes(b"PK\x03\x04 garbage")
    with pytest.raises(O.OperatorError):
        O.load_model(path)
