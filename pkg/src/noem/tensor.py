"""Minimal dense-tensor math with tape-based reverse-mode autodiff.

The engine records primitive ops (matmul, broadcast add/mul, tanh, relu,
conv2d, reductions, gather/concat/reshape) on an explicit :class:`Tape`.
Reverse mode produces exact gradients for a recorded scalar; forward mode
is provided through dual-number payloads (:class:`DualArray`), which also
compose with the reverse pass to give exact forward-over-reverse Hessians.

All numeric kernels dispatch on either ``numpy.ndarray`` or ``DualArray``
so the same op/backward formulas serve plain and dual execution.
"""

from __future__ import annotations

import threading
import warnings

import numpy as np

# Finiteness validation after every primitive op. NaN provenance is the
# dominant practical failure mode when Newton iterates drive a network out
# of its trained range, so the check defaults to on.
CHECK_FINITE = True


class TensorError(ValueError):
    pass


class NonFiniteError(TensorError):
    pass


# ---------------------------------------------------------------------------
# dual-number payload (forward mode)


class DualArray:
    """Value/tangent pair; tangent follows the value through every kernel."""

    __slots__ = ("val", "tan")

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=np.float64)
        self.tan = np.broadcast_to(np.asarray(tan, dtype=np.float64), self.val.shape).copy() \
            if np.shape(tan) != np.shape(self.val) else np.asarray(tan, dtype=np.float64)

    @property
    def shape(self):
        return self.val.shape

    @property
    def size(self):
        return self.val.size

    def copy(self):
        return DualArray(self.val.copy(), self.tan.copy())

    def __repr__(self):
        return f"DualArray(val={self.val!r}, tan={self.tan!r})"


def _is_dual(x):
    return isinstance(x, DualArray)


def _val(x):
    return x.val if _is_dual(x) else x


def _tan(x, shape):
    if _is_dual(x):
        return np.broadcast_to(x.tan, shape) if x.tan.shape != shape else x.tan
    return None


def _pack(val, tan):
    return val if tan is None else DualArray(val, tan)


def _tsum(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


# ---------------------------------------------------------------------------
# numeric kernels (dispatch on ndarray | DualArray)


def k_add(a, b):
    v = _val(a) + _val(b)
    ta, tb = _tan(a, v.shape), _tan(b, v.shape)
    return _pack(v, _tsum(ta, tb))


def k_sub(a, b):
    v = _val(a) - _val(b)
    ta, tb = _tan(a, v.shape), _tan(b, v.shape)
    if tb is not None:
        tb = -tb
    return _pack(v, _tsum(ta, tb))


def k_mul(a, b):
    va, vb = _val(a), _val(b)
    v = va * vb
    t = None
    if _is_dual(a):
        t = _tsum(t, a.tan * vb)
    if _is_dual(b):
        t = _tsum(t, va * b.tan)
    if t is not None and t.shape != v.shape:
        t = np.broadcast_to(t, v.shape)
    return _pack(v, t)


def k_neg(a):
    if _is_dual(a):
        return DualArray(-a.val, -a.tan)
    return -a


def k_matmul(a, b):
    va, vb = _val(a), _val(b)
    v = va @ vb
    t = None
    if _is_dual(a):
        t = _tsum(t, a.tan @ vb)
    if _is_dual(b):
        t = _tsum(t, va @ b.tan)
    return _pack(v, t)


def k_tanh(a):
    v = np.tanh(_val(a))
    if _is_dual(a):
        return DualArray(v, (1.0 - v * v) * a.tan)
    return v


def k_relu(a):
    va = _val(a)
    v = np.maximum(va, 0.0)
    if _is_dual(a):
        return DualArray(v, np.where(va > 0.0, a.tan, 0.0))
    return v


def k_sum(a, axis=None, keepdims=False):
    v = _val(a).sum(axis=axis, keepdims=keepdims)
    if _is_dual(a):
        return DualArray(v, a.tan.sum(axis=axis, keepdims=keepdims))
    return v


def k_reshape(a, shape):
    if _is_dual(a):
        return DualArray(a.val.reshape(shape), a.tan.reshape(shape))
    return a.reshape(shape)


def k_transpose(a):
    if _is_dual(a):
        return DualArray(a.val.T, a.tan.T)
    return a.T


def k_broadcast_to(a, shape):
    if _is_dual(a):
        return DualArray(
            np.broadcast_to(a.val, shape).copy(), np.broadcast_to(a.tan, shape).copy()
        )
    return np.broadcast_to(a, shape).copy()


def k_gather(a, indices, axis=0):
    if _is_dual(a):
        return DualArray(np.take(a.val, indices, axis=axis), np.take(a.tan, indices, axis=axis))
    return np.take(a, indices, axis=axis)


def k_scatter_add(shape, indices, vals, axis=0):
    """Adjoint of gather: accumulate rows of ``vals`` into a zero array."""
    if _is_dual(vals):
        return DualArray(
            k_scatter_add(shape, indices, vals.val, axis=axis),
            k_scatter_add(shape, indices, vals.tan, axis=axis),
        )
    out = np.zeros(shape, dtype=np.float64)
    if axis == 0:
        np.add.at(out, indices, vals)
    else:
        out_m = np.moveaxis(out, axis, 0)
        np.add.at(out_m, indices, np.moveaxis(vals, axis, 0))
    return out


def k_concat(parts, axis=0):
    if any(_is_dual(p) for p in parts):
        vs = [_val(p) for p in parts]
        v = np.concatenate(vs, axis=axis)
        ts = []
        for p in parts:
            ts.append(p.tan if _is_dual(p) else np.zeros_like(_val(p)))
        return DualArray(v, np.concatenate(ts, axis=axis))
    return np.concatenate(parts, axis=axis)


def k_slice(a, slices):
    if _is_dual(a):
        return DualArray(a.val[slices], a.tan[slices])
    return a[slices]


def k_unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the operand shape."""
    g = grad
    gshape = _val(g).shape
    if gshape == shape:
        return g
    extra = len(gshape) - len(shape)
    if extra > 0:
        g = k_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and _val(g).shape[i] != 1)
    if axes:
        g = k_sum(g, axis=axes, keepdims=True)
    return g


def _im2col(x, kh, kw, stride):
    """(N,C,H,W) -> (N, C*kh*kw, oh*ow) patch matrix."""
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols, x_shape, kh, kw, stride):
    n, c, h, w = x_shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros(x_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return out


def k_conv2d(x, w, stride):
    """Valid cross-correlation of (N,C,H,W) with (F,C,kh,kw)."""
    def _single(xv, wv):
        n = xv.shape[0]
        f, _, kh, kw = wv.shape
        oh = (xv.shape[2] - kh) // stride + 1
        ow = (xv.shape[3] - kw) // stride + 1
        cols = _im2col(xv, kh, kw, stride)
        out = np.einsum("fk,nkp->nfp", wv.reshape(f, -1), cols)
        return out.reshape(n, f, oh, ow)

    xv, wv = _val(x), _val(w)
    v = _single(xv, wv)
    t = None
    if _is_dual(x):
        t = _tsum(t, _single(x.tan, wv))
    if _is_dual(w):
        t = _tsum(t, _single(xv, w.tan))
    return _pack(v, t)


def _check_finite(data, op):
    if not CHECK_FINITE:
        return
    v = _val(data)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    if _is_dual(data) and not np.all(np.isfinite(data.tan)):
        raise NonFiniteError(f"non-finite tangent produced by op '{op}'")


# ---------------------------------------------------------------------------
# tape and tensors


_STATE = threading.local()


def _tape_stack():
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
    return _STATE.stack


class Tensor:
    """Dense real tensor; payload is an ndarray or a DualArray."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        if not _is_dual(data):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return _val(self.data).shape

    @property
    def size(self):
        return _val(self.data).size

    def value(self):
        """Plain ndarray view of the payload (primal part when dual)."""
        return _val(self.data)

    # operator sugar, routed through the op layer
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("tensor", "parents", "backward", "tape")

    def __init__(self, tensor, parents, backward, tape):
        self.tensor = tensor
        self.parents = parents
        self.backward = backward
        self.tape = tape


class Tape:
    """Ordered record of primitive ops; creation order is topological."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def _record(self, out, parents, backward):
        out.node = _Node(out, parents, backward, self)
        self.nodes.append(out.node)

    def gradients(self, output, inputs):
        """Reverse pass from a scalar ``output`` to each tensor in ``inputs``.

        Each recorded node is visited exactly once, in reverse creation
        order.  Inputs that the output does not depend on get a zero
        gradient and a warning.
        """
        if output.size != 1:
            raise TensorError(f"grad requires a scalar output, got shape {output.shape}")
        grads = {}
        seed = _val(output.data)
        one = np.ones_like(seed)
        if _is_dual(output.data):
            grads[id(output)] = DualArray(one, np.zeros_like(one))
        else:
            grads[id(output)] = one
        for node in reversed(self.nodes):
            g = grads.pop(id(node.tensor), None)
            if g is None:
                continue
            for parent, pgrad in node.backward(g):
                if not (parent.requires_grad or parent.node is not None):
                    continue
                cur = grads.get(id(parent))
                grads[id(parent)] = pgrad if cur is None else k_add(cur, pgrad)
        out = []
        for t in inputs:
            g = grads.get(id(t))
            if g is None:
                warnings.warn("gradient requested for a tensor the output does not depend on")
                base = _val(t.data)
                g = np.zeros_like(base)
                if _is_dual(t.data):
                    g = DualArray(g, np.zeros_like(base))
            t.grad = g
            out.append(g)
        return out


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _finish(op, data, parents, backward):
    _check_finite(data, op)
    req = any(p.requires_grad or p.node is not None for p in parents)
    out = Tensor(data, requires_grad=req)
    tape = _active_tape()
    if tape is not None and req:
        tape._record(out, parents, backward)
    return out


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = k_add(a.data, b.data)

    def backward(g):
        return [(a, k_unbroadcast(g, a.shape)), (b, k_unbroadcast(g, b.shape))]

    return _finish("add", data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = k_sub(a.data, b.data)

    def backward(g):
        return [(a, k_unbroadcast(g, a.shape)), (b, k_unbroadcast(k_neg(g), b.shape))]

    return _finish("sub", data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = k_mul(a.data, b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        return [
            (a, k_unbroadcast(k_mul(g, b_data), a.shape)),
            (b, k_unbroadcast(k_mul(g, a_data), b.shape)),
        ]

    return _finish("mul", data, (a, b), backward)


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        return [(a, k_neg(g))]

    return _finish("neg", k_neg(a.data), (a,), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise TensorError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    data = k_matmul(a.data, b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        return [
            (a, k_matmul(g, k_transpose(b_data))),
            (b, k_matmul(k_transpose(a_data), g)),
        ]

    return _finish("matmul", data, (a, b), backward)


def tanh(a):
    a = _as_tensor(a)
    data = k_tanh(a.data)
    out_data = data

    def backward(g):
        one_minus = k_sub(1.0, k_mul(out_data, out_data))
        return [(a, k_mul(g, one_minus))]

    return _finish("tanh", data, (a,), backward)


def relu(a):
    a = _as_tensor(a)
    data = k_relu(a.data)
    mask = (_val(a.data) > 0.0).astype(np.float64)

    def backward(g):
        return [(a, k_mul(g, mask))]

    return _finish("relu", data, (a,), backward)


def tensor_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = k_sum(a.data, axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def backward(g):
        if axis is None:
            return [(a, k_broadcast_to(k_reshape(g, (1,) * len(in_shape)), in_shape))]
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(in_shape) for ax in axes)
        if not keepdims:
            shape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))
            g = k_reshape(g, shape)
        return [(a, k_broadcast_to(g, in_shape))]

    return _finish("sum", data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = _as_tensor(a)
    in_shape = a.shape

    def backward(g):
        return [(a, k_reshape(g, in_shape))]

    return _finish("reshape", k_reshape(a.data, shape), (a,), backward)


def transpose(a):
    a = _as_tensor(a)

    def backward(g):
        return [(a, k_transpose(g))]

    return _finish("transpose", k_transpose(a.data), (a,), backward)


def gather(a, indices, axis=0):
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    in_shape = a.shape

    def backward(g):
        return [(a, k_scatter_add(in_shape, indices, g, axis=axis))]

    return _finish("gather", k_gather(a.data, indices, axis=axis), (a,), backward)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    data = k_concat([p.data for p in parts], axis=axis)

    def backward(g):
        outs, start = [], 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * len(p.shape)
            sl[axis] = slice(start, start + n)
            outs.append((p, k_slice(g, tuple(sl))))
            start += n
        return outs

    return _finish("concat", data, tuple(parts), backward)


def conv2d(a, w, stride=1):
    """Valid cross-correlation: a (N,C,H,W), w (F,C,kh,kw)."""
    a, w = _as_tensor(a), _as_tensor(w)
    if len(a.shape) != 4 or len(w.shape) != 4:
        raise TensorError(f"conv2d expects 4-d operands, got {a.shape}, {w.shape}")
    f, c, kh, kw = w.shape
    data = k_conv2d(a.data, w.data, stride)
    a_data, w_data = a.data, w.data
    in_shape = a.shape

    def backward(g):
        n = in_shape[0]
        gv = k_reshape(g, (n, f, -1))
        # dW = sum_n g_n @ cols_n^T ; dX = col2im(W^T @ g_n)
        def _cols(x):
            return _im2col(x, kh, kw, stride)

        if _is_dual(a_data) or _is_dual(gv):
            cols_v = _cols(_val(a_data))
            cols_t = _cols(a_data.tan) if _is_dual(a_data) else None
            cols = _pack(cols_v, cols_t)
        else:
            cols = _cols(a_data)

        def _einsum_fk(gq, colsq):
            return np.einsum("nfp,nkp->fk", gq, colsq)

        gvv, gvt = _val(gv), (gv.tan if _is_dual(gv) else None)
        colsv, colst = _val(cols), (cols.tan if _is_dual(cols) else None)
        dw_v = _einsum_fk(gvv, colsv)
        dw_t = None
        if gvt is not None:
            dw_t = _tsum(dw_t, _einsum_fk(gvt, colsv))
        if colst is not None:
            dw_t = _tsum(dw_t, _einsum_fk(gvv, colst))
        dw = _pack(dw_v.reshape(w.shape), None if dw_t is None else dw_t.reshape(w.shape))

        wk = _val(w_data).reshape(f, -1)
        wk_t = w_data.tan.reshape(f, -1) if _is_dual(w_data) else None

        def _dcols(gq, wq):
            return np.einsum("fk,nfp->nkp", wq, gq)

        dcols_v = _dcols(gvv, wk)
        dcols_t = None
        if gvt is not None:
            dcols_t = _tsum(dcols_t, _dcols(gvt, wk))
        if wk_t is not None:
            dcols_t = _tsum(dcols_t, _dcols(gvv, wk_t))
        dx_v = _col2im(dcols_v, in_shape, kh, kw, stride)
        dx_t = None if dcols_t is None else _col2im(dcols_t, in_shape, kh, kw, stride)
        return [(a, _pack(dx_v, dx_t)), (w, dw)]

    return _finish("conv2d", data, (a, w), backward)


# ---------------------------------------------------------------------------
# public differentiation API


def grad(scalar_output, inputs):
    """Gradient of a tape-recorded scalar w.r.t. each tensor in ``inputs``."""
    if scalar_output.node is None:
        raise TensorError("output was not recorded on a tape")
    return scalar_output.node.tape.gradients(scalar_output, list(inputs))


def directional_derivative(evaluable, at_point, direction):
    """Jacobian-vector product via dual-number forward propagation.

    ``evaluable`` maps a Tensor to a Tensor built from engine ops.
    """
    at = np.asarray(at_point, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if at.shape != d.shape:
        raise TensorError(f"direction shape {d.shape} does not match point shape {at.shape}")
    x = Tensor(DualArray(at, d))
    y = evaluable(x)
    data = y.data
    if not _is_dual(data):
        return np.zeros_like(_val(data))
    return data.tan.copy()


def hessian_of(scalar_function, point, mode="fd_of_gradient", step=1e-5):
    """Symmetrized Hessian of a scalar function of a flat vector.

    ``fd_of_gradient`` central-differences the reverse-mode gradient with a
    per-coordinate step ``step * (1 + |p_i|)``; ``forward_over_reverse``
    composes dual-number forward mode with the reverse pass exactly.
    """
    p = np.asarray(point, dtype=np.float64).ravel()
    d = p.size

    def _gradient(vec):
        x = Tensor(vec, requires_grad=True)
        with Tape() as tape:
            y = scalar_function(x)
            g = tape.gradients(y, [x])[0]
        return g

    cols = np.empty((d, d), dtype=np.float64)
    if mode == "fd_of_gradient":
        for i in range(d):
            h = step * (1.0 + abs(p[i]))
            pp, pm = p.copy(), p.copy()
            pp[i] += h
            pm[i] -= h
            gp = _gradient(pp)
            gm = _gradient(pm)
            cols[:, i] = (_val(gp) - _val(gm)).ravel() / (2.0 * h)
    elif mode == "forward_over_reverse":
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            x = Tensor(DualArray(p, e), requires_grad=True)
            with Tape() as tape:
                y = scalar_function(x)
                g = tape.gradients(y, [x])[0]
            if _is_dual(g):
                cols[:, i] = g.tan.ravel()
            else:
                cols[:, i] = 0.0
    else:
        raise TensorError(f"unknown hessian mode {mode!r}")
    bad = np.argwhere(~np.isfinite(cols))
    if bad.size:
        i, j = bad[0]
        raise NonFiniteError(f"non-finite Hessian entry at coordinates ({i}, {j})")
    return 0.5 * (cols + cols.T)
