import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noem import tensor as T


def finite_diff_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar numpy function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        g.ravel()[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g


def test_grad_square():
    w = T.Tensor(3.0, requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(w, w)
        (g,) = tape.gradients(y, [w])
    assert np.allclose(g, 6.0)


def test_grad_requires_scalar_output():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(w, w)
        with pytest.raises(T.TensorError):
            tape.gradients(y, [w])


def test_detached_input_zero_grad_with_warning():
    w = T.Tensor(2.0, requires_grad=True)
    z = T.Tensor(5.0, requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(w, w)
        with pytest.warns(UserWarning):
            gz = tape.gradients(y, [z])[0]
    assert np.allclose(gz, 0.0)


def _mlp_loss(params, x, y):
    """Two-layer tanh MLP MSE loss built from engine ops."""
    w1, b1, w2, b2 = params
    h = T.tanh(T.add(T.matmul(x, w1), b1))
    pred = T.add(T.matmul(h, w2), b2)
    d = T.sub(pred, y)
    return T.mean(T.mul(d, d))


def test_mlp_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.normal(size=(7, 3)))
    y = T.Tensor(rng.normal(size=(7, 2)))
    shapes = [(3, 5), (5,), (5, 2), (2,)]
    vals = [rng.normal(size=s) * 0.5 for s in shapes]

    params = [T.Tensor(v, requires_grad=True) for v in vals]
    with T.Tape() as tape:
        loss = _mlp_loss(params, x, y)
        grads = tape.gradients(loss, params)

    for k, v in enumerate(vals):
        def f(pv, k=k):
            trial = [t if i != k else T.Tensor(pv) for i, t in enumerate(params)]
            return float(_mlp_loss(trial, x, y).value())

        fd = finite_diff_grad(f, v, h=1e-5)
        denom = max(np.linalg.norm(fd), 1e-8)
        assert np.linalg.norm(grads[k] - fd) / denom < 1e-6


def test_batch_sum_linearity():
    rng = np.random.default_rng(1)
    xs = rng.normal(size=(4, 3))
    w = T.Tensor(rng.normal(size=(3, 1)), requires_grad=True)

    with T.Tape() as tape:
        out = T.tensor_sum(T.matmul(T.Tensor(xs), w))
        g_all = tape.gradients(out, [w])[0].copy()

    g_acc = np.zeros_like(g_all)
    for i in range(4):
        with T.Tape() as tape:
            out = T.tensor_sum(T.matmul(T.Tensor(xs[i : i + 1]), w))
            g_acc += tape.gradients(out, [w])[0]
    assert np.allclose(g_all, g_acc)


def test_directional_derivative_identity():
    v = np.array([1.0, -2.0, 0.5])
    d = np.array([0.3, 0.1, -0.7])
    out = T.directional_derivative(lambda x: x, v, d)
    assert np.allclose(out, d)


def test_directional_derivative_linear_layer_independent_of_x():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(3, 4))
    d = rng.normal(size=(1, 3))

    def f(x):
        return T.matmul(x, T.Tensor(W))

    out1 = T.directional_derivative(f, rng.normal(size=(1, 3)), d)
    out2 = T.directional_derivative(f, rng.normal(size=(1, 3)), d)
    assert np.allclose(out1, d @ W)
    assert np.allclose(out1, out2)


def test_directional_derivative_mlp_vs_fd():
    rng = np.random.default_rng(3)
    w1 = T.Tensor(rng.normal(size=(2, 8)))
    b1 = T.Tensor(rng.normal(size=(8,)))
    w2 = T.Tensor(rng.normal(size=(8, 1)))

    def net(x):
        return T.matmul(T.tanh(T.add(T.matmul(x, w1), b1)), w2)

    x0 = rng.normal(size=(5, 2))
    d = rng.normal(size=(5, 2))
    jvp = T.directional_derivative(net, x0, d)
    h = 1e-6
    fd = (net(T.Tensor(x0 + h * d)).value() - net(T.Tensor(x0 - h * d)).value()) / (2 * h)
    assert np.linalg.norm(jvp - fd) / np.linalg.norm(fd) < 1e-6


def test_directional_derivative_shape_mismatch():
    with pytest.raises(T.TensorError):
        T.directional_derivative(lambda x: x, np.zeros(3), np.zeros(4))


QUAD_A = np.array([[2.0, 1.0], [1.0, 3.0]])


def _quad(x):
    ax = T.matmul(T.reshape(x, (1, 2)), T.Tensor(QUAD_A))
    return T.mul(T.tensor_sum(T.mul(ax, T.reshape(x, (1, 2)))), 0.5)


@pytest.mark.parametrize("mode", ["fd_of_gradient", "forward_over_reverse"])
def test_hessian_quadratic(mode):
    H = T.hessian_of(_quad, np.array([0.3, -1.2]), mode=mode)
    assert np.allclose(H, QUAD_A, atol=1e-8)


def test_hessian_modes_agree_on_network():
    rng = np.random.default_rng(4)
    w1 = T.Tensor(rng.normal(size=(3, 6)))
    b1 = T.Tensor(rng.normal(size=(6,)))
    w2 = T.Tensor(rng.normal(size=(6, 1)))

    def f(x):
        h = T.tanh(T.add(T.matmul(T.reshape(x, (1, 3)), w1), b1))
        return T.tensor_sum(T.matmul(h, w2))

    p = rng.normal(size=3)
    h_fd = T.hessian_of(f, p, mode="fd_of_gradient")
    h_fr = T.hessian_of(f, p, mode="forward_over_reverse")
    assert np.linalg.norm(h_fd - h_fr) / np.linalg.norm(h_fr) < 1e-4
    assert np.array_equal(h_fd, h_fd.T)
    assert np.array_equal(h_fr, h_fr.T)


def test_hessian_constant_function():
    H = T.hessian_of(lambda x: T.Tensor(1.5), np.zeros(3), mode="fd_of_gradient")
    assert np.allclose(H, 0.0)


def test_nan_trips_error():
    a = T.Tensor([1.0, 0.0])
    with pytest.raises(T.NonFiniteError):
        T.mul(a, T.Tensor([np.inf, 1.0]))


def test_tape_replay_determinism():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 4))
    w = rng.normal(size=(4, 4))

    def run():
        wt = T.Tensor(w, requires_grad=True)
        with T.Tape() as tape:
            y = T.mean(T.tanh(T.matmul(T.Tensor(x), wt)))
            g = tape.gradients(y, [wt])[0]
        return y.value().copy(), g.copy()

    y1, g1 = run()
    y2, g2 = run()
    assert np.array_equal(y1, y2)
    assert np.array_equal(g1, g2)


# -- per-primitive gradient property tests ----------------------------------

shape_2d = st.tuples(st.integers(1, 4), st.integers(1, 4))


def _check_unary(op_t, op_np, x):
    xt = T.Tensor(x, requires_grad=True)
    with T.Tape() as tape:
        y = T.tensor_sum(T.mul(op_t(xt), T.Tensor(np.arange(1.0, 1.0 + x.size).reshape(x.shape))))
        g = tape.gradients(y, [xt])[0]
    w = np.arange(1.0, 1.0 + x.size).reshape(x.shape)
    fd = finite_diff_grad(lambda v: float((op_np(v) * w).sum()), x)
    denom = max(np.linalg.norm(fd), 1e-6)
    assert np.linalg.norm(g - fd) / denom < 1e-6


@settings(max_examples=25, deadline=None)
@given(shape_2d, st.integers(0, 2**31 - 1))
def test_tanh_grad_property(shape, seed):
    x = np.random.default_rng(seed).normal(size=shape)
    _check_unary(T.tanh, np.tanh, x)


@settings(max_examples=25, deadline=None)
@given(shape_2d, st.integers(0, 2**31 - 1))
def test_relu_grad_property(shape, seed):
    x = np.random.default_rng(seed).normal(size=shape) + 0.05
    _check_unary(T.relu, lambda v: np.maximum(v, 0.0), x)


@settings(max_examples=25, deadline=None)
@given(shape_2d, shape_2d, st.integers(0, 2**31 - 1))
def test_matmul_grad_property(sa, sb, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=sa)
    b = rng.normal(size=(sa[1], sb[1]))
    at = T.Tensor(a, requires_grad=True)
    bt = T.Tensor(b, requires_grad=True)
    with T.Tape() as tape:
        y = T.tensor_sum(T.matmul(at, bt))
        ga, gb = tape.gradients(y, [at, bt])
    fda = finite_diff_grad(lambda v: float((v @ b).sum()), a)
    fdb = finite_diff_grad(lambda v: float((a @ v).sum()), b)
    assert np.allclose(ga, fda, rtol=1e-6, atol=1e-8)
    assert np.allclose(gb, fdb, rtol=1e-6, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_broadcast_add_grad_property(n, m, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, m))
    b = rng.normal(size=(m,))
    at = T.Tensor(a, requires_grad=True)
    bt = T.Tensor(b, requires_grad=True)
    with T.Tape() as tape:
        y = T.tensor_sum(T.mul(T.add(at, bt), T.add(at, bt)))
        ga, gb = tape.gradients(y, [at, bt])
    fda = finite_diff_grad(lambda v: float(((v + b) ** 2).sum()), a)
    fdb = finite_diff_grad(lambda v: float(((a + v) ** 2).sum()), b)
    assert np.allclose(ga, fda, rtol=1e-6, atol=1e-7)
    assert np.allclose(gb, fdb, rtol=1e-6, atol=1e-7)


def test_gather_concat_grads():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 2))
    idx = np.array([0, 3, 3, 1])
    at = T.Tensor(a, requires_grad=True)
    with T.Tape() as tape:
        picked = T.gather(at, idx, axis=0)
        joined = T.concat([picked, T.mul(picked, 2.0)], axis=1)
        y = T.tensor_sum(T.mul(joined, joined))
        g = tape.gradients(y, [at])[0]

    def f(v):
        p = v[idx]
        j = np.concatenate([p, 2.0 * p], axis=1)
        return float((j * j).sum())

    fd = finite_diff_grad(f, a)
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-7)


def test_conv2d_forward_and_grad():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 1, 9, 9))
    w = rng.normal(size=(3, 1, 5, 5)) * 0.3

    # forward against a naive loop
    xt, wt = T.Tensor(x), T.Tensor(w)
    out = T.conv2d(xt, wt, stride=2).value()
    assert out.shape == (2, 3, 3, 3)
    naive = np.zeros_like(out)
    for n in range(2):
        for f in range(3):
            for i in range(3):
                for j in range(3):
                    patch = x[n, :, 2 * i : 2 * i + 5, 2 * j : 2 * j + 5]
                    naive[n, f, i, j] = (patch * w[f]).sum()
    assert np.allclose(out, naive, atol=1e-12)

    xt = T.Tensor(x, requires_grad=True)
    wt = T.Tensor(w, requires_grad=True)
    with T.Tape() as tape:
        y = T.tensor_sum(T.mul(T.conv2d(xt, wt, stride=2), 0.5))
        gx, gw = tape.gradients(y, [xt, wt])

    def fx(v):
        return 0.5 * float(T.conv2d(T.Tensor(v), T.Tensor(w), stride=2).value().sum())

    def fw(v):
        return 0.5 * float(T.conv2d(T.Tensor(x), T.Tensor(v), stride=2).value().sum())

    assert np.allclose(gx, finite_diff_grad(fx, x), rtol=1e-5, atol=1e-7)
    assert np.allclose(gw, finite_diff_grad(fw, w), rtol=1e-5, atol=1e-7)
