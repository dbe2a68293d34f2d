import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from beaconloc import autodiff as ad
from beaconloc.errors import ShapeError
from oracles import central_difference, log_sum_exp_ref, naive_conv2d, relative_error


def grad_of(f, *values):
    """Analytic gradients of scalar ``sum(f(*vars))`` for each input."""
    leaves = [ad.parameter(v) for v in values]
    out = ad.sum(f(*leaves))
    ad.backward(out)
    return [leaf.grad for leaf in leaves]


def check_fd(f, *values, tol=1e-6, h=1e-5):
    got = grad_of(f, *values)
    for i, v in enumerate(values):
        def scalar(x, i=i):
            args = list(values)
            args[i] = x
            return float(np.sum(f(*args)))
        want = central_difference(scalar, v, h)
        assert np.max(relative_error(got[i], want, floor=1e-6)) < tol, f"input {i}"


R = np.random.default_rng(0)
A = R.normal(size=(3, 4))
B = R.normal(size=(3, 4))
POS = np.abs(A) + 0.5

UNARY = {
    "sigmoid": (ad.sigmoid, A),
    "tanh": (ad.tanh, A),
    "relu": (ad.relu, A),
    "leaky_relu": (ad.leaky_relu, A),
    "square": (ad.square, A),
    "exp": (ad.exp, A),
    "log": (ad.log, POS),
    "sin": (ad.sin, A),
    "cos": (ad.cos, A),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    f, x = UNARY[name]
    check_fd(lambda v: ad.mul(f(v), B), x)


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.logaddexp, ad.atan2])
def test_binary_gradients_with_broadcast(op):
    check_fd(lambda a, b: ad.mul(op(a, b), B), A, R.normal(size=(1, 4)))


def test_matmul_and_affine():
    w = R.normal(size=(4, 5))
    c = R.normal(size=(2, 3, 5))
    check_fd(lambda x, w: ad.mul(ad.matmul(x, w), c), R.normal(size=(2, 3, 4)), w)
    check_fd(lambda x, w, b: ad.square(ad.affine(x, w, b)), A, w, R.normal(size=5))
    check_fd(lambda v, w: ad.matmul(v, w), R.normal(size=4), w)


def test_structure_ops():
    c6, c342, c234 = R.normal(size=(6, 4)), R.normal(size=(3, 4, 2)), R.normal(size=(2, 3, 4))
    check_fd(lambda a, b: ad.mul(ad.concat([a, b], axis=0), c6), A, B)
    check_fd(lambda a, b: ad.mul(ad.stack([a, b], axis=-1), c342), A, B)
    check_fd(lambda a: ad.mul(ad.getitem(a, (Ellipsis, 1)), np.arange(3.0)), A)
    check_fd(lambda a: ad.square(ad.reshape(a, (4, 3))), A)
    check_fd(lambda a: ad.mul(ad.broadcast_to(a, (2, 3, 4)), c234), A)
    check_fd(lambda a: ad.square(ad.mean(a, axis=1)), A)


def test_gather_rows_repeated_indices():
    idx = np.array([[0, 0, 2], [1, 1, 1]])
    x, c = R.normal(size=(2, 3, 2)), R.normal(size=(2, 3, 2))
    check_fd(lambda v: ad.mul(ad.gather_rows(v, idx), c), x)
    out = ad.gather_rows(x, idx)
    assert np.array_equal(out[1, 2], x[1, 1])


def test_log_sum_exp_gradient_and_values():
    check_fd(lambda a: ad.mul(ad.log_sum_exp(a, axis=1), np.arange(1.0, 4.0)), A)
    v = np.array([-np.inf, 0.5, -2.0, -np.inf])
    assert ad.log_sum_exp(v) == pytest.approx(log_sum_exp_ref(v), rel=1e-14)
    assert ad.log_sum_exp(np.full(3, -np.inf)) == -np.inf


def test_log_sum_exp_neg_inf_gets_zero_grad():
    x = ad.parameter([-np.inf, 1.0, 2.0])
    ad.backward(ad.log_sum_exp(x))
    assert x.grad[0] == 0.0
    assert x.grad.sum() == pytest.approx(1.0)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-700, 700)))
def test_log_sum_exp_matches_reference(v):
    assert math.isclose(ad.log_sum_exp(v), log_sum_exp_ref(v), rel_tol=1e-12, abs_tol=1e-12)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_normalized_weights_sum_to_one(v):
    assert abs(ad.log_sum_exp(ad.normalize_log_weights(v))) < 1e-12


def test_conv2d_matches_naive_and_fd():
    x = R.normal(size=(2, 7, 6))
    w = R.normal(size=(3, 2, 3, 3))
    b = R.normal(size=3)
    for stride, pad in [(1, 0), (2, 1), (1, 1)]:
        got = ad.conv2d(x, w, b, stride, pad)
        assert np.allclose(got, naive_conv2d(x, w, b, stride, pad), atol=1e-12)
    weights = R.normal(size=ad.conv2d(x, w, b, 2, 1).shape)
    check_fd(lambda x, w, b: ad.mul(ad.conv2d(x, w, b, 2, 1), weights), x, w, b)


def test_batch_norm_training_gradient():
    g, beta = R.normal(size=4), R.normal(size=4)
    c = R.normal(size=(3, 5, 4))
    check_fd(lambda x, g, b: ad.mul(ad.batch_norm(x, g, b, axis=(0, 1)), c), R.normal(size=(3, 5, 4)), g, beta)


def test_batch_norm_inference_uses_running_stats():
    x = R.normal(size=(6, 2)) * 3 + 1
    running = {"mean": np.zeros(2), "var": np.ones(2)}
    ad.batch_norm(x, np.ones(2), np.zeros(2), running=running, momentum=1.0)
    assert np.allclose(running["mean"], x.mean(0))
    assert np.allclose(running["var"], x.var(0, ddof=1))
    out = ad.batch_norm(x, np.ones(2), np.zeros(2), running=running, training=False)
    assert np.allclose(out, (x - x.mean(0)) / np.sqrt(x.var(0, ddof=1) + 1e-5))
    frozen = {k: v.copy() for k, v in running.items()}
    check_fd(lambda v: ad.square(ad.batch_norm(v, np.ones(2), np.zeros(2), running=frozen, training=False)), x)


def test_gaussian_sample_is_reparametrized():
    rng = np.random.default_rng(3)
    mu, sigma = ad.parameter(np.zeros(5)), ad.parameter(np.full(5, 2.0))
    s = ad.gaussian_sample(mu, sigma, rng)
    ad.backward(ad.sum(s))
    eps = np.random.default_rng(3).standard_normal(5)
    assert np.array_equal(mu.grad, np.ones(5))
    assert np.allclose(sigma.grad, eps)


def test_plain_arrays_pass_through():
    out = ad.tanh(ad.add(A, B))
    assert isinstance(out, np.ndarray)
    assert not isinstance(ad.matmul(A, B.T), ad.Var)


def test_gradient_accumulates_over_shared_use():
    x = ad.parameter(3.0)
    ad.backward(ad.add(ad.mul(x, x), x))
    assert float(x.grad) == 7.0


def test_backward_requires_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(x, 2.0))


@pytest.mark.parametrize("call", [
    lambda: ad.add(np.ones(3), np.ones(4)),
    lambda: ad.matmul(np.ones((2, 3)), np.ones((2, 3))),
    lambda: ad.affine(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2)),
    lambda: ad.concat([np.ones((2, 3)), np.ones((3, 2))], axis=0),
    lambda: ad.conv2d(np.ones((2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1)),
    lambda: ad.gather_rows(np.ones((2, 3)), np.zeros((3, 3), int)),
])
def test_shape_errors(call):
    with pytest.raises(ShapeError):
        call()
