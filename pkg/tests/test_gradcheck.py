"""Backward-pass verification via central finite differences."""

import numpy as np
import pytest

from envfuse import autodiff as ad
from envfuse.gradcheck import grad_check
from envfuse.nn import MultiHeadAttention, mha_forward


def test_quadratic_gradient_is_2w():
    rng = np.random.default_rng(0)
    w = ad.parameter(rng.standard_normal((3, 4)))

    def loss():
        return ad.sum_all(ad.mul(w, w))

    err = grad_check(loss, [("w", w)])
    assert err < 1e-6
    # the analytic gradient itself is known in closed form
    w.zero_grad()
    loss().backward()
    np.testing.assert_allclose(w.grad, 2.0 * w.data, atol=1e-12)


def test_mha_gradients_match_fd():
    rng = np.random.default_rng(1)
    p = MultiHeadAttention.init(rng, 4, 2)
    query = ad.constant(rng.standard_normal((2, 4)))
    ctx = ad.constant(rng.standard_normal((3, 4)))

    def loss():
        out = mha_forward(query, ctx, p)
        return ad.sum_all(ad.mul(out.updated, out.updated))

    err = grad_check(loss, p.parameters())
    assert err < 1e-3


def test_unused_parameter_has_zero_error():
    rng = np.random.default_rng(2)
    used = ad.parameter(rng.standard_normal((2, 2)))
    unused = ad.parameter(rng.standard_normal((2, 2)))

    def loss():
        return ad.sum_all(ad.mul(used, used))

    err = grad_check(loss, [("used", used), ("unused", unused)])
    assert err < 1e-6
    unused.zero_grad()
    used.zero_grad()
    loss().backward()
    assert unused.grad is None  # never touched by the graph


def test_epsilon_validation():
    w = ad.parameter(np.ones((1, 1)))

    def loss():
        return ad.sum_all(w)

    with pytest.raises(ValueError):
        grad_check(loss, [("w", w)], epsilon=1e-6)
    with pytest.raises(ValueError):
        grad_check(loss, [("w", w)], epsilon=0.1)


def test_non_finite_loss_raises():
    w = ad.parameter(np.array([[np.inf]]))

    def loss():
        return ad.sum_all(w)

    with pytest.raises(FloatingPointError):
        grad_check(loss, [("w", w)])


def test_composite_graph_ops():
    # exercise gather/slice/concat/tanh/softmax backward paths in one graph
    rng = np.random.default_rng(3)
    a = ad.parameter(rng.standard_normal((4, 6)))
    b = ad.parameter(rng.standard_normal((2, 3)))

    def loss():
        picked = ad.gather_rows(a, np.array([2, 0]))
        left = ad.slice_cols(picked, 0, 3)
        mixed = ad.add(ad.tanh(left), b)
        sm = ad.softmax_rows(ad.matmul(mixed, ad.transpose(b)))
        return ad.mean_all(ad.mul(sm, sm))

    err = grad_check(loss, [("a", a), ("b", b)])
    assert err < 1e-3
