import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from leba import tensor as T
from conftest import central_diff, max_rel_err


def scalar_fn(build):
    """Wrap a graph-building function into a plain float function for finite differences."""
    return lambda x: float(build(T.constant(x)).value)


# --------------------------------------------------------------- forward


def test_relu_definition():
    out = T.relu(T.constant([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.value, [0.0, 0.0, 2.0])


def test_log_softmax_uniform():
    out = T.log_softmax(T.constant(np.full((1, 4), 0.7)))
    np.testing.assert_allclose(out.value, np.full((1, 4), math.log(0.25)), atol=1e-15)


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 3))
    out = T.matmul(T.constant(np.eye(3)), T.constant(a))
    np.testing.assert_array_equal(out.value, a)


@pytest.mark.parametrize(
    "op, shapes",
    [
        (T.add, ((2, 3), (3, 2))),
        (T.mul, ((2,), (3,))),
        (T.matmul, ((2, 3), (2, 3))),
        (T.conv2d, ((1, 2, 5, 5), (3, 1, 3, 3))),
    ],
)
def test_shape_mismatch_names_op_and_shapes(op, shapes):
    a, b = (T.constant(np.zeros(s)) for s in shapes)
    with pytest.raises(T.ShapeError) as err:
        op(a, b)
    msg = str(err.value)
    assert op.__name__ in msg
    assert str(shapes[0]) in msg and str(shapes[1]) in msg


# --------------------------------------------------------------- backward


def test_backward_sum_of_squares():
    x = T.variable([1.0, 2.0, 3.0])
    (g,) = T.backward(T.sum(x * x), [x])
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_backward_log_softmax_entry_sums_to_zero(rng):
    x = T.variable(rng.normal(size=(1, 6)))
    root = T.sum(T.gather(T.log_softmax(x), [2]))
    (g,) = T.backward(root, [x])
    assert abs(g.sum()) < 1e-12


def test_backward_multiple_use_sites_sum():
    x = T.variable([1.5])
    (g,) = T.backward(T.sum(x + x), [x])
    np.testing.assert_array_equal(g, [2.0])


def test_backward_non_scalar_root():
    x = T.variable([1.0, 2.0])
    with pytest.raises(T.ContractError):
        T.backward(x * x, [x])


def test_backward_non_ancestor_is_zero():
    x = T.variable([1.0, 2.0])
    y = T.variable(np.ones((2, 3)))
    gx, gy = T.backward(T.sum(x * x), [x, y])
    np.testing.assert_array_equal(gy, np.zeros((2, 3)))


def _mlp_builder(rng):
    w1 = rng.normal(size=(5, 7))
    b1 = rng.normal(size=(7,))
    w2 = rng.normal(size=(7, 3))

    def build(x):
        h = T.relu(T.matmul(x, T.constant(w1)) + T.broadcast_to(T.constant(b1), (x.shape[0], 7)))
        return T.sum(T.gather(T.log_softmax(T.matmul(h, T.constant(w2))), [0, 2]))

    return build


def test_backward_random_mlp_vs_finite_differences(rng):
    build = _mlp_builder(rng)
    x0 = rng.normal(size=(2, 5))
    x = T.variable(x0)
    (g,) = T.backward(build(x), [x])
    fd = central_diff(scalar_fn(build), x0, h=1e-5)
    assert max_rel_err(g, fd) < 1e-6


# Every primitive, checked on random inputs against central differences.
# Each entry maps x (shape given) to a node; a random weight tensor c makes the output
# a generic scalar via sum(out * c).
PRIMITIVES = {
    "add": ((3, 4), lambda x, r: T.add(x, T.constant(r.normal(size=(3, 4))))),
    "sub": ((3, 4), lambda x, r: T.sub(T.constant(r.normal(size=(3, 4))), x)),
    "mul": ((3, 4), lambda x, r: T.mul(x, x)),
    "mul_scalar": ((3, 4), lambda x, r: T.mul_scalar(x, -2.5)),
    "add_scalar": ((3, 4), lambda x, r: T.mul(T.add_scalar(x, 0.3), x)),
    "reciprocal": ((3, 4), lambda x, r: T.reciprocal(T.add_scalar(T.mul(x, x), 1.0))),
    "relu": ((3, 4), lambda x, r: T.relu(x)),
    "log": ((3, 4), lambda x, r: T.log(T.add_scalar(T.mul(x, x), 0.5))),
    "exp": ((3, 4), lambda x, r: T.exp(x)),
    "reshape": ((3, 4), lambda x, r: T.reshape(x, (4, 3))),
    "transpose": ((3, 4), lambda x, r: T.transpose(x)),
    "matmul": ((3, 4), lambda x, r: T.matmul(x, T.constant(r.normal(size=(4, 2))))),
    "log_softmax": ((3, 4), lambda x, r: T.log_softmax(x)),
    "gather": ((3, 4), lambda x, r: T.gather(x, [0, 3, 1])),
    "scatter": ((3,), lambda x, r: T.scatter(x, [1, 0, 3], (3, 4))),
    "broadcast_to": ((1, 4), lambda x, r: T.broadcast_to(x, (3, 4))),
    "sum_to": ((3, 4), lambda x, r: T.sum_to(x, (4,))),
    "sum": ((3, 4), lambda x, r: T.sum(T.mul(x, x))),
    "mean": ((3, 4), lambda x, r: T.mean(T.exp(x))),
    "mse": ((3, 4), lambda x, r: T.mse(x, T.constant(r.normal(size=(3, 4))))),
    "conv2d": ((2, 2, 6, 6), lambda x, r: T.conv2d(x, T.constant(r.normal(size=(3, 2, 3, 3))))),
    "conv2d_input_grad": (
        (2, 3, 6, 6),
        lambda x, r: T.conv2d_input_grad(x, T.constant(r.normal(size=(3, 2, 5, 5)))),
    ),
    "conv2d_weight_grad": (
        (2, 2, 6, 6),
        lambda x, r: T.conv2d_weight_grad(x, T.constant(r.normal(size=(2, 3, 6, 6))), 3),
    ),
    "avg_pool2": ((2, 2, 6, 6), lambda x, r: T.avg_pool2(x)),
    "upsample2": ((2, 2, 3, 3), lambda x, r: T.upsample2(x)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_check(name):
    shape, fn = PRIMITIVES[name]
    seed = sum(map(ord, name))
    x0 = np.random.default_rng(seed).normal(size=shape)
    if name == "relu":
        x0 = np.where(np.abs(x0) < 0.1, 0.5, x0)  # stay off the kink

    def build(x):
        r = np.random.default_rng(seed + 1)
        out = fn(x, r)
        return T.sum(T.mul(out, T.constant(r.normal(size=out.shape))))

    x = T.variable(x0)
    (g,) = T.backward(build(x), [x])
    fd = central_diff(scalar_fn(build), x0, h=1e-5)
    assert max_rel_err(g, fd) < 1e-5


def test_conv_weight_gradient(rng):
    x0 = rng.normal(size=(2, 3, 5, 5))
    w0 = rng.normal(size=(4, 3, 3, 3))
    c = rng.normal(size=(2, 4, 5, 5))

    def build(w):
        return T.sum(T.mul(T.conv2d(T.constant(x0), w), T.constant(c)))

    w = T.variable(w0)
    (g,) = T.backward(build(w), [w])
    assert max_rel_err(g, central_diff(scalar_fn(build), w0)) < 1e-5


def test_conv_partner_ops_gradients(rng):
    w0 = rng.normal(size=(4, 3, 3, 3))
    g0 = rng.normal(size=(2, 4, 5, 5))
    x0 = rng.normal(size=(2, 3, 5, 5))
    c_in = rng.normal(size=(2, 3, 5, 5))
    c_w = rng.normal(size=(4, 3, 3, 3))

    for target, build in [
        (g0, lambda g: T.sum(T.mul(T.conv2d_input_grad(g, T.constant(w0)), T.constant(c_in)))),
        (w0, lambda w: T.sum(T.mul(T.conv2d_input_grad(T.constant(g0), w), T.constant(c_in)))),
        (x0, lambda x: T.sum(T.mul(T.conv2d_weight_grad(x, T.constant(g0), 3), T.constant(c_w)))),
        (g0, lambda g: T.sum(T.mul(T.conv2d_weight_grad(T.constant(x0), g, 3), T.constant(c_w)))),
    ]:
        v = T.variable(target)
        (grad,) = T.backward(build(v), [v])
        assert max_rel_err(grad, central_diff(scalar_fn(build), target)) < 1e-5


# --------------------------------------------------------------- grad_as_node


def test_grad_as_node_linear_scalar():
    a = T.variable([1.7])
    x = T.variable([0.4])
    gx = T.grad_as_node(T.sum(a * x), x)
    np.testing.assert_allclose(gx.value, [1.7])
    (ga,) = T.backward(T.sum(gx * gx), [a])
    np.testing.assert_allclose(ga, [2 * 1.7])


def test_grad_as_node_independent_root():
    a = T.variable([2.0])
    x = T.variable([1.0, 2.0])
    gx = T.grad_as_node(T.sum(a * a), x)
    np.testing.assert_array_equal(gx.value, [0.0, 0.0])
    (ga,) = T.backward(T.sum(gx * gx), [a])
    np.testing.assert_array_equal(ga, [0.0])


def _relu_net_directional(theta, W, x0, delta):
    """(d/dx theta^T relu(W x)) . delta as a graph node."""
    x = T.variable(x0)
    h = T.relu(T.matmul(W, T.reshape(x, (x0.size, 1))))
    root = T.sum(T.mul(h, T.constant(theta)))
    gx = T.grad_as_node(root, x)
    return T.sum(T.mul(gx, T.constant(delta)))


def test_grad_as_node_mixed_derivative_vs_finite_differences(rng):
    W0 = rng.normal(size=(6, 4))
    theta = rng.normal(size=(6, 1))
    x0 = rng.normal(size=(4,))
    delta = rng.normal(size=(4,))
    W = T.variable(W0)
    (gW,) = T.backward(_relu_net_directional(theta, W, x0, delta), [W])

    def first_order(Wv):
        x = T.variable(x0)
        h = T.relu(T.matmul(T.constant(Wv), T.reshape(x, (4, 1))))
        (g,) = T.backward(T.sum(T.mul(h, T.constant(theta))), [x])
        return float(g @ delta)

    fd = central_diff(first_order, W0, h=1e-4)
    assert max_rel_err(gW, fd) < 1e-3


def test_unsupported_double_backward_is_explicit():
    def opaque_square(a):
        return T.make_op(
            "opaque_square",
            a.value**2,
            (a,),
            lambda g: (T.constant(2 * a.value * g.value),),
            twice_differentiable=False,
        )

    x = T.variable([3.0])
    (g,) = T.backward(T.sum(opaque_square(x)), [x])
    np.testing.assert_array_equal(g, [6.0])
    with pytest.raises(T.UnsupportedOpError):
        T.grad_as_node(T.sum(opaque_square(x)), x)


def test_graph_survives_backward_and_release():
    x = T.variable([1.0, 2.0])
    root = T.sum(T.exp(x))
    g1 = T.backward(root, [x])[0]
    g2 = T.backward(root, [x])[0]
    np.testing.assert_array_equal(g1, g2)
    T.release(root)
    assert root.parents == ()


# --------------------------------------------------------------- kernels and smoothing


def test_gaussian_kernel_degenerate():
    np.testing.assert_array_equal(T.gaussian_kernel(1, 0.7), [[1.0]])


def test_gaussian_kernel_uniform_limit():
    np.testing.assert_allclose(T.gaussian_kernel(3, 1e6), np.full((3, 3), 1 / 9), atol=1e-6)


def test_gaussian_kernel_center_by_direct_summation():
    total = 0.0
    for i in range(-2, 3):
        for j in range(-2, 3):
            total += math.exp(-(i * i + j * j) / 2.0)
    k = T.gaussian_kernel(5, 1.0)
    assert abs(k[2, 2] - 1.0 / total) < 1e-15
    assert abs(k.sum() - 1.0) < 1e-15


def test_gaussian_kernel_even_size_rejected():
    with pytest.raises(T.ContractError):
        T.gaussian_kernel(4, 1.0)


def test_smooth_identity_kernel(rng):
    m = rng.normal(size=(2, 6, 6))
    np.testing.assert_array_equal(T.smooth(m, np.array([[1.0]])), m)


def test_smooth_impulse_response():
    m = np.zeros((7, 7))
    m[3, 4] = 1.0
    k = np.arange(9, dtype=float).reshape(3, 3)
    out = T.smooth(m, k)
    # cross-correlation: out[i, j] = sum k[a, b] m[i + a - 1, j + b - 1]
    np.testing.assert_array_equal(out[2:5, 3:6], k[::-1, ::-1])
    assert out.sum() == k.sum()


def brute_force_smooth(m: np.ndarray, k: np.ndarray) -> np.ndarray:
    H, W = m.shape
    r = k.shape[0] // 2
    out = np.zeros_like(m)
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    ii, jj = i + a, j + b
                    if 0 <= ii < H and 0 <= jj < W:
                        acc += k[a + r, b + r] * m[ii, jj]
            out[i, j] = acc
    return out


def test_smooth_matches_brute_force(rng):
    m = rng.normal(size=(8, 8))
    k = T.gaussian_kernel(3, 1.0)
    np.testing.assert_allclose(T.smooth(m, k), brute_force_smooth(m, k), rtol=0, atol=1e-12)


def test_smooth_kernel_too_large():
    with pytest.raises(T.ContractError):
        T.smooth(np.zeros((3, 3)), T.gaussian_kernel(5, 1.0))


@settings(max_examples=40, deadline=None)
@given(
    a=st.floats(-5, 5),
    b=st.floats(-5, 5),
    A=arrays(np.float64, (2, 6, 6), elements=st.floats(-1, 1)),
    B=arrays(np.float64, (2, 6, 6), elements=st.floats(-1, 1)),
)
def test_smooth_is_linear(a, b, A, B):
    k = T.gaussian_kernel(3, 1.0)
    lhs = T.smooth(a * A + b * B, k)
    rhs = a * T.smooth(A, k) + b * T.smooth(B, k)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)
