"""
Tests for the reverse-mode tape.
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), 'backend'))

from deep_wishart import autodiff as ad
from deep_wishart.errors import ShapeMismatch
from deep_wishart.numerics import RngStream


def grad_of(f, value):
    tape = ad.Tape()
    x = tape.variable(value)
    return tape.gradient(f(x), [x])[0]


def test_sum_of_squares_gradient():
    np.testing.assert_allclose(grad_of(lambda x: ad.sum(x * x), [1.0, 2.0]), [2.0, 4.0])


def test_logdet_via_diagonal_gradient():
    grad = grad_of(lambda l: 2.0 * ad.log_diag_sum(l), np.eye(2))
    np.testing.assert_allclose(grad, 2.0 * np.eye(2))


def test_gradcheck_trace_of_cholesky():
    m = np.array([[4.0, 2.0], [2.0, 5.0]])
    assert ad.gradcheck(lambda x: ad.trace(ad.cholesky(x)), m) < 1e-5


def test_gradcheck_sum_of_squares():
    point = RngStream(0).normal((3, 4))
    assert ad.gradcheck(lambda x: ad.sum(ad.square(x)), point) < 1e-7


def test_gamma_logpdf_derivative_in_x():
    grad = grad_of(lambda x: ad.gamma_logpdf(x, 2.0, 0.5), 3.0)
    assert float(grad) == pytest.approx(1.0 / 3.0 - 0.5, rel=1e-12)


def test_stop_gradient_product_rule():
    grad = grad_of(lambda x: x * ad.stop_gradient(x), 3.0)
    assert float(grad) == pytest.approx(3.0)


def test_stop_gradient_primal():
    tape = ad.Tape()
    np.testing.assert_array_equal(ad.stop_gradient(tape.variable([1.0, 2.0])).value, [1.0, 2.0])
    np.testing.assert_array_equal(ad.stop_gradient(np.array([1.0, 2.0])), [1.0, 2.0])


def test_primitives_are_polymorphic():
    x = np.array([[2.0, 0.5], [0.5, 3.0]])
    out = ad.trace(ad.cholesky(x)) + ad.sum(ad.softplus(x))
    assert not ad.is_var(out)
    assert float(out) == pytest.approx(np.trace(np.linalg.cholesky(x)) + np.sum(np.logaddexp(0, x)))


def test_unused_input_gets_zero_gradient():
    tape = ad.Tape()
    x, y = tape.variable([1.0, 2.0]), tape.variable([[3.0]])
    gx, gy = tape.gradient(ad.sum(ad.exp(x)), [x, y])
    np.testing.assert_allclose(gx, np.exp([1.0, 2.0]))
    np.testing.assert_array_equal(gy, np.zeros((1, 1)))


def test_backward_visits_each_node_once():
    tape = ad.Tape()
    x = tape.variable(np.ones(3))
    out = ad.sum(ad.exp(x) * ad.log(x + 1.0))
    tape.backward(out)
    assert tape.visits == len(tape)


def test_backward_needs_scalar():
    tape = ad.Tape()
    x = tape.variable(np.ones(3))
    with pytest.raises(ShapeMismatch):
        tape.backward(ad.exp(x))


def test_mixing_tapes_is_rejected():
    a, b = ad.Tape().variable(1.0), ad.Tape().variable(2.0)
    with pytest.raises(ShapeMismatch):
        a + b


def test_broadcast_gradients_are_reduced():
    tape = ad.Tape()
    row = tape.variable(np.ones(3))
    mat = tape.variable(np.ones((2, 3)))
    g_row, g_mat = tape.gradient(ad.sum(row * mat), [row, mat])
    np.testing.assert_allclose(g_row, [2.0, 2.0, 2.0])
    np.testing.assert_allclose(g_mat, np.ones((2, 3)))


def test_gradcheck_matrix_primitives():
    rng = RngStream(1)
    x = rng.normal((4, 4))
    pd = x @ x.T + 4.0 * np.eye(4)
    l = np.linalg.cholesky(pd)
    rhs = rng.normal((4, 2))
    cases = [
        (lambda m: ad.sum(ad.square(ad.cholesky(m))), pd),
        (lambda m: ad.log_diag_sum(ad.cholesky(m)), pd),
        (lambda t: ad.sum(ad.tri_solve(t, rhs)), l),
        (lambda m: ad.trace(m @ ad.transpose(m)), x),
        (lambda m: ad.sum(ad.sigmoid(m) * ad.diag_matrix(ad.diag(m))), x),
    ]
    for f, point in cases:
        assert ad.gradcheck(f, point) < 1e-5


def test_cholesky_gradient_on_large_matrix_uses_blocks():
    rng = RngStream(2)
    x = rng.normal((300, 300))
    pd = x @ x.T / 300 + np.eye(300)
    tape = ad.Tape()
    m = tape.variable(pd)
    grad = tape.gradient(ad.log_diag_sum(ad.cholesky(m)), [m])[0]
    # d/dSigma of 0.5 log|Sigma| is 0.5 Sigma^-1
    np.testing.assert_allclose(grad, 0.5 * np.linalg.inv(pd), atol=1e-10)


def test_gradcheck_named_point():
    point = {"mean": np.array([0.3, -0.2]), "std": np.array([1.1, 0.7])}
    x = np.array([1.0, -1.0])
    err = ad.gradcheck(lambda v: ad.sum(ad.normal_logpdf(x, v["mean"], v["std"])), point)
    assert err < 1e-6


def test_gamma_reparam_beta_derivative_is_scale():
    u = np.array([0.2, 0.5, 0.9])
    tape = ad.Tape()
    alpha, beta = tape.variable(np.full(3, 2.5)), tape.variable(np.full(3, 0.8))
    z = ad.gamma_reparam(alpha, beta, u)
    g_beta = tape.gradient(ad.sum(z), [beta])[0]
    np.testing.assert_allclose(g_beta, -z.value / 0.8, rtol=1e-12)


def test_gamma_reparam_alpha_derivative():
    u = np.array([0.1, 0.5, 0.95])
    err = ad.gradcheck(lambda a: ad.sum(ad.gamma_reparam(a, 1.3, u)), np.array([0.4, 2.0, 9.0]))
    assert err < 1e-3


def test_inv_softplus_inverts_softplus():
    y = np.array([1e-3, 0.5, 2.0, 30.0])
    np.testing.assert_allclose(ad.softplus(ad.inv_softplus(y)), y, rtol=1e-12)


def test_embed_and_concat_gradients():
    index = np.tril_indices(3, -1)
    assert ad.gradcheck(lambda v: ad.sum(ad.square(ad.embed(v, index, (3, 3)))), np.array([1.0, 2.0, 3.0])) < 1e-7
    assert ad.gradcheck(lambda v: ad.sum(ad.square(ad.concat([v, 2.0 * v], axis=1))), np.ones((2, 2))) < 1e-7
