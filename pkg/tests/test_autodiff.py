"""Reverse-mode engine: analytic examples, finite-difference oracle, properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flmae import autodiff as ad


def test_identity_graph_returns_input():
    x = ad.const([1.0, 2.0, 3.0])
    y = ad.add(x, ad.const(np.zeros(3)))
    assert np.array_equal(y.data, [1.0, 2.0, 3.0])


def test_matmul_identity():
    out = ad.matmul(ad.const(np.eye(2)), ad.const([[5.0], [7.0]]))
    assert np.array_equal(out.data, [[5.0], [7.0]])


def test_softmax_symmetry():
    out = ad.softmax(ad.const([[0.0, 0.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_quadratic_gradient():
    theta = ad.leaf([3.0])
    loss = ad.mean_all(ad.mul(theta, theta))
    ad.backward(loss)
    assert np.allclose(theta.grad, [6.0])


def test_constant_loss_zero_gradient():
    theta = ad.leaf([2.0, -1.0])
    loss = ad.mean_all(ad.mul(theta, ad.const([0.0, 0.0])))
    ad.backward(loss)
    assert np.allclose(theta.grad, 0.0)


def _two_layer_loss(params: np.ndarray):
    """20-parameter network: 3->4 gelu -> 4->1, squared output."""
    w1 = ad.leaf(params[:12].reshape(3, 4))
    b1 = ad.leaf(params[12:16])
    w2 = ad.leaf(params[16:20].reshape(4, 1))
    x = ad.const(np.linspace(-1, 1, 6).reshape(2, 3))
    h = ad.gelu(ad.add(ad.matmul(x, w1), b1))
    out = ad.matmul(h, w2)
    loss = ad.mean_all(ad.mul(out, out))
    grad = ad.grad_flat(loss, [w1, b1, w2])
    return loss.item(), grad


def test_two_layer_network_matches_finite_differences():
    params = np.random.default_rng(7).normal(size=20)
    err = ad.finite_difference_check(_two_layer_loss, params, epsilon=1e-5)
    assert err < 1e-6


def test_quadratic_finite_difference_tight():
    def quadratic(p):
        t = ad.leaf(p)
        loss = ad.mean_all(ad.mul(t, t))
        return loss.item(), ad.grad_flat(loss, [t])

    err = ad.finite_difference_check(quadratic, np.array([0.3, -1.2, 2.0]), epsilon=1e-5)
    assert err < 1e-9


def test_zero_parameter_graph_error_zero():
    err = ad.finite_difference_check(lambda p: (0.0, p), np.zeros(0), epsilon=1e-5)
    assert err == 0.0


def test_finite_difference_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        ad.finite_difference_check(lambda p: (0.0, p), np.zeros(3), epsilon=0.0)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_gradient_linearity(a, b):
    """grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2) on shared leaves."""
    base = np.array([0.7, -0.4, 1.1])

    def single(p, pick):
        t = ad.leaf(p)
        l1 = ad.mean_all(ad.mul(t, t))
        l2 = ad.mean_all(ad.gelu(t))
        loss = l1 if pick == 1 else l2
        return ad.grad_flat(loss, [t])

    def combined(p):
        t = ad.leaf(p)
        l1 = ad.mean_all(ad.mul(t, t))
        l2 = ad.mean_all(ad.gelu(t))
        loss = ad.add(ad.mul(l1, a), ad.mul(l2, b))
        return ad.grad_flat(loss, [t])

    expected = a * single(base, 1) + b * single(base, 2)
    assert np.allclose(combined(base), expected, atol=1e-10)


def test_forward_backward_deterministic():
    params = np.random.default_rng(3).normal(size=20)
    l1, g1 = _two_layer_loss(params)
    l2, g2 = _two_layer_loss(params)
    assert l1 == l2
    assert np.array_equal(g1, g2)


def test_backward_requires_recorded_graph():
    with pytest.raises(RuntimeError, match="backward before forward"):
        ad.backward(ad.const([1.0]))


def test_non_finite_output_rejected():
    t = ad.leaf([1.0])
    bad = ad.mul(t, ad.const([np.inf]))
    with pytest.raises(ad.NonFiniteError):
        ad.backward(bad)


def test_check_finite_mode_flags_forward_nan():
    ad.set_check_finite(True)
    try:
        with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
            ad.mul(ad.leaf([1e308]), ad.const([1e308]))
    finally:
        ad.set_check_finite(False)


def test_backward_visits_shared_node_once():
    """Diamond graph: y used twice; gradient accumulates exactly once each."""
    t = ad.leaf([2.0])
    y = ad.mul(t, t)           # t^2
    z = ad.add(y, y)           # 2 t^2 -> dz/dt = 4t = 8
    ad.backward(ad.mean_all(z))
    assert np.allclose(t.grad, [8.0])


def test_gather_scatter_roundtrip_gradients():
    rng = np.random.default_rng(0)
    x = ad.leaf(rng.normal(size=(2, 5, 3)))
    idx = np.array([[0, 2], [1, 4]])
    picked = ad.gather_rows(x, idx)
    loss = ad.mean_all(ad.mul(picked, picked))
    ad.backward(loss)
    dense = np.zeros((2, 5, 3))
    dense[[0, 0, 1, 1], [0, 2, 1, 4]] = 2 * x.data[[0, 0, 1, 1], [0, 2, 1, 4]] / picked.data.size
    assert np.allclose(x.grad, dense)


def test_unbroadcast_bias_gradient():
    w = ad.leaf(np.zeros(4))
    x = ad.const(np.ones((3, 4)))
    out = ad.add(x, w)
    ad.backward(ad.mean_all(ad.mul(out, out)))
    # d/dw mean((1+w)^2) with 12 elements: each bias column hits 3 rows
    assert np.allclose(w.grad, 2 * 3 / 12)


def test_layer_norm_gradient_matches_fd():
    def ln_loss(p):
        x = ad.leaf(p[:8].reshape(2, 4))
        g = ad.leaf(p[8:12])
        b = ad.leaf(p[12:16])
        y = ad.layer_norm(x, g, b)
        loss = ad.mean_all(ad.mul(y, y))
        return loss.item(), ad.grad_flat(loss, [x, g, b])

    params = np.random.default_rng(11).normal(size=16)
    assert ad.finite_difference_check(ln_loss, params, epsilon=1e-6) < 1e-6


def test_softmax_gradient_matches_fd():
    def sm_loss(p):
        x = ad.leaf(p.reshape(2, 5))
        y = ad.softmax(x)
        loss = ad.mean_all(ad.mul(y, ad.const(np.arange(10.0).reshape(2, 5))))
        return loss.item(), ad.grad_flat(loss, [x])

    params = np.random.default_rng(13).normal(size=10)
    assert ad.finite_difference_check(sm_loss, params, epsilon=1e-6) < 1e-6


def test_float32_mode_runs_kernel_ops():
    """32-bit tensors exist for the transfer-size analogue; ops must accept them."""
    x32 = ad.leaf(np.linspace(-1, 1, 8).reshape(2, 4), dtype=np.float32)
    g = ad.leaf(np.ones(4), dtype=np.float32)
    b = ad.leaf(np.zeros(4), dtype=np.float32)
    y = ad.gelu(ad.layer_norm(x32, g, b))
    assert y.data.dtype == np.float32
    ad.backward(ad.mean_all(ad.mul(y, y)))
    assert x32.grad is not None and x32.grad.dtype == np.float32
