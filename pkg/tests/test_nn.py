import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from leakybnn.errors import ShapeMismatch
from leakybnn.nn import (
    Architecture,
    LayerSpec,
    PointNetwork,
    conv2d_backward,
    conv2d_forward,
    convnet,
    forward,
    init_params,
    leaky_relu,
    leaky_relu_grad,
    loss_and_grads,
    maxpool2x2_backward,
    maxpool2x2_forward,
    mlp,
)
from leakybnn import probe

from oracles import central_difference, max_rel_err, reference_relu_mlp, softmax_nll


@pytest.mark.parametrize("x, alpha, expected", [(-2.0, 0.0, 0.0), (-2.0, -1.0, 2.0), (-2.0, 1.0, -2.0),
                                                (3.0, -0.5, 3.0), (0.0, -0.7, 0.0)])
def test_leaky_relu_values(x, alpha, expected):
    assert leaky_relu(x, alpha) == expected


@pytest.mark.parametrize("x, alpha, expected", [(-3.0, 0.0, 0.0), (5.0, -0.5, 1.0), (-3.0, -0.5, -0.5),
                                                (0.0, 0.3, 0.3)])
def test_leaky_relu_grad_values(x, alpha, expected):
    assert leaky_relu_grad(x, alpha) == expected


def test_leaky_relu_grad_matches_difference_quotient():
    x = np.array([-2.0, -0.3, 0.4, 1.7])
    for alpha in (-1.0, -0.5, 0.0, 0.25, 1.0):
        fd = (leaky_relu(x + 1e-6, alpha) - leaky_relu(x - 1e-6, alpha)) / 2e-6
        np.testing.assert_allclose(leaky_relu_grad(x, alpha), fd, rtol=1e-8)


def test_single_weight_forward():
    arch = Architecture((1,), (LayerSpec("dense", (1, 1)),))
    net = PointNetwork(arch, [np.array([[1.0]]), np.array([0.0])])
    logits, _ = forward(net, np.array([[2.0]]))
    assert logits.tolist() == [[2.0]]


def test_identity_relu_layer_zeroes_negative_input():
    arch = Architecture((2,), (LayerSpec("dense", (2, 2)), LayerSpec("dense", (2, 2))))
    net = PointNetwork(arch, [np.eye(2), np.zeros(2), np.eye(2), np.zeros(2)], alpha=0.0)
    _, cache = forward(net, np.array([[-1.0, -3.0]]))
    assert np.all(cache[0].z == 0.0)


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    arch = mlp((7, 5), input_shape=(4, 4))
    net = PointNetwork(arch, init_params(arch, rng), alpha=-0.3)
    x = rng.random((6, 4, 4))
    a, _ = forward(net, x)
    b, _ = forward(net, x)
    assert np.array_equal(a, b)


def test_shape_mismatch():
    arch = mlp((3,), input_shape=(4,))
    net = PointNetwork(arch, init_params(arch, np.random.default_rng(0)))
    with pytest.raises(ShapeMismatch):
        forward(net, np.zeros((2, 5)))
    with pytest.raises(ShapeMismatch):
        PointNetwork(arch, [np.zeros((3, 5)), np.zeros(3), np.zeros((10, 3)), np.zeros(10)])


def test_uniform_logits_nll_is_log10():
    arch = Architecture((3,), (LayerSpec("dense", (10, 3)),))
    net = PointNetwork(arch, [np.zeros((10, 3)), np.zeros(10)])
    for label in range(10):
        nll, _ = loss_and_grads(net, np.ones((1, 3)), np.array([label]))
        assert abs(nll - math.log(10)) < 1e-12


def test_dominant_correct_logit_drives_nll_to_zero():
    arch = Architecture((1,), (LayerSpec("dense", (10, 1)),))
    previous = np.inf
    for margin in (1.0, 10.0, 50.0, 700.0):
        b = np.zeros(10)
        b[4] = margin
        nll, _ = loss_and_grads(PointNetwork(arch, [np.zeros((10, 1)), b]), np.zeros((1, 1)), np.array([4]))
        assert nll <= previous
        assert nll == pytest.approx(math.log1p(9 * math.exp(-margin)), rel=1e-9, abs=1e-15)
        previous = nll
    assert previous < 1e-15


def _fd_check(net, x, y):
    _, grads = loss_and_grads(net, x, y)
    work = net.copy()

    def f(params):
        logits, _ = forward(PointNetwork(net.arch, params, net.alpha), x)
        return softmax_nll(logits, y)

    fd = central_difference(f, work.params)
    return max_rel_err(grads, fd)


@pytest.mark.parametrize("alpha", [-1.0, -0.5, 0.0, 0.5, 1.0])
def test_dense_gradients_match_finite_differences(alpha):
    rng = np.random.default_rng(11)
    arch = mlp((8, 6), input_shape=(5,))
    net = PointNetwork(arch, init_params(arch, rng), alpha)
    x, y = rng.normal(size=(7, 5)), rng.integers(0, 10, 7)
    assert _fd_check(net, x, y) < 1e-5


@pytest.mark.parametrize("alpha", [-0.5, 0.0, 0.25])
def test_conv_gradients_match_finite_differences(alpha):
    rng = np.random.default_rng(5)
    arch = convnet(channels=(2, 3), kernel=3, input_shape=(10, 10), n_out=4)
    assert sum(int(np.prod(s)) for s in arch.param_shapes()) <= 500
    net = PointNetwork(arch, init_params(arch, rng), alpha)
    x, y = rng.random((3, 10, 10)), rng.integers(0, 4, 3)
    assert _fd_check(net, x, y) < 1e-5


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), alpha=st.sampled_from([-1.0, -0.5, 0.0, 0.3, 1.0]),
       h1=st.integers(1, 12), h2=st.integers(1, 8), n=st.integers(1, 6))
def test_gradient_property_random_small_nets(seed, alpha, h1, h2, n):
    rng = np.random.default_rng(seed)
    arch = mlp((h1, h2), input_shape=(6,), n_out=5)
    params = [p + 0.1 * rng.normal(size=p.shape) for p in init_params(arch, rng)]
    net = PointNetwork(arch, params, alpha)
    assert net.n_params <= 500
    x, y = rng.normal(size=(n, 6)), rng.integers(0, 5, n)
    _, caches = forward(net, x)
    # finite differences are meaningless across the activation kink
    assume(alpha == 1.0 or min(np.abs(c.a).min() for c in caches) > 1e-3)
    assert _fd_check(net, x, y) < 1e-5


def test_conv_1x1_unit_kernel_is_identity():
    x = np.random.default_rng(0).random((2, 1, 5, 4))
    out = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    x, K, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 2)), rng.normal(size=4)
    out = conv2d_forward(x, K, b)
    ref = np.zeros((2, 4, 4, 4))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 2] * K[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    x, K, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    w = rng.normal(size=(2, 3, 3, 3))  # fixed projection makes the output scalar

    def f(ps):
        return float(np.sum(w * conv2d_forward(ps[0], ps[1], ps[2])))

    dx, dK, db = conv2d_backward(x, K, w)
    fd = central_difference(f, [x.copy(), K.copy(), b.copy()])
    assert max_rel_err([dx, dK, db], fd) < 1e-5


def test_pool_tie_routes_gradient_to_first_index():
    x = np.ones((1, 1, 2, 2))
    out, idx = maxpool2x2_forward(x)
    assert out.ravel().tolist() == [1.0]
    dx = maxpool2x2_backward(np.array([[[[5.0]]]]), idx, x.shape)
    assert dx.ravel().tolist() == [5.0, 0.0, 0.0, 0.0]


def test_pool_drops_odd_edge_and_backward_matches_fd():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 2, 5, 7))
    out, idx = maxpool2x2_forward(x)
    assert out.shape == (2, 2, 2, 3)
    w = rng.normal(size=out.shape)
    dx = maxpool2x2_backward(w, idx, x.shape)
    fd = central_difference(lambda ps: float(np.sum(w * maxpool2x2_forward(ps[0])[0])), [x.copy()])
    assert max_rel_err([dx], fd) < 1e-5
    assert np.all(dx[:, :, 4, :] == 0) and np.all(dx[:, :, :, 6] == 0)


def test_relu_endpoint_matches_reference():
    rng = np.random.default_rng(8)
    arch = mlp((9, 7), input_shape=(3, 4))
    net = PointNetwork(arch, init_params(arch, rng), alpha=0.0)
    x = rng.normal(size=(10, 3, 4))
    logits, _ = forward(net, x)
    np.testing.assert_allclose(logits, reference_relu_mlp(net.params, x), rtol=1e-13, atol=1e-13)


def test_linear_endpoint_is_affine_in_input():
    rng = np.random.default_rng(9)
    arch = mlp((9, 7), input_shape=(6,))
    net = PointNetwork(arch, init_params(arch, rng), alpha=1.0)
    x1, x2 = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
    f = lambda x: forward(net, x)[0]
    for t in (-2.0, 0.3, 1.5):
        np.testing.assert_allclose(f(t * x1 + (1 - t) * x2), t * f(x1) + (1 - t) * f(x2), atol=1e-12)


def test_gradient_vanishes_below_bound_for_nonnegative_inputs():
    rng = np.random.default_rng(12)
    arch = mlp((6, 5), input_shape=(4,))
    net = PointNetwork(arch, init_params(arch, rng), alpha=0.0)
    x, y = rng.random((9, 4)), rng.integers(0, 10, 9)
    for addr in (probe.WeightAddress(1, 2, 3), probe.WeightAddress(0, 1, 2)):
        w_star = probe.theoretical_w_star(net, addr, (x, y))
        assert np.isfinite(w_star)
        work = net.copy()
        work.weight(addr.layer)[addr.out, addr.in_] = w_star - 0.5
        _, grads = loss_and_grads(work, x, y)
        assert abs(grads[2 * addr.layer][addr.out, addr.in_]) < 1e-12
