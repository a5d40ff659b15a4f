"""Tests for the reverse-mode autodiff primitives"""

import numpy as np
import pytest

from src.autodiff.tensor import (Tape, Tensor, add, backward, check_finite, conv2d, exp,
                                 global_avg_pool, log, log_softmax, matmul, mean, mul, no_grad,
                                 pick, relu, reshape, softmax_cross_entropy, sqrt, tensor_sum)
from src.utils.errors import GradientError, NumericalError, ShapeError


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_conv(x, k):
    n, cin, h, w = x.shape
    cout = k.shape[0]
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, cout, h, w))
    for b in range(n):
        for o in range(cout):
            for r in range(h):
                for c in range(w):
                    for ci in range(cin):
                        for i in range(3):
                            for j in range(3):
                                out[b, o, r, c] += padded[b, ci, r + i, c + j] * k[o, ci, i, j]
    return out


def test_matmul_identity_and_dot_product():
    """Test that matmul reproduces the identity and a 1x2 by 2x1 product"""
    out = matmul(np.eye(2), np.array([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(matmul(a, b).data, naive_matmul(a, b), atol=1e-12)


def test_matmul_rejects_inner_dimension_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_conv2d_delta_kernel_is_identity(rng):
    x = rng.normal(size=(1, 1, 5, 5))
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d(x, kernel).data, x)
    assert np.all(conv2d(x, np.zeros((1, 1, 3, 3))).data == 0.0)


def test_conv2d_matches_naive_loops(rng):
    x, k = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(conv2d(x, k).data, naive_conv(x, k), atol=1e-12)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_relu_and_uniform_cross_entropy():
    np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])
    loss = softmax_cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
    assert float(loss.data) == pytest.approx(np.log(2.0), abs=1e-15)


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))


def test_sum_and_square_gradients():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    backward(tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    v = Tensor([1.0, 2.0], requires_grad=True)
    backward(tensor_sum(v * v))
    np.testing.assert_array_equal(v.grad, [2.0, 4.0])


def test_gradients_accumulate_over_multiple_consumers():
    x = Tensor([3.0], requires_grad=True)
    backward(tensor_sum(add(mul(x, 2.0), mul(x, x))))
    np.testing.assert_allclose(x.grad, [2.0 + 6.0])


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = tensor_sum(x * x)
    backward(loss)
    with pytest.raises(GradientError):
        backward(loss)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GradientError):
        backward(x * 2.0)


def test_tape_visits_each_node_once_parents_first():
    x = Tensor([1.0, 2.0], requires_grad=True)
    shared = x * 2.0
    loss = tensor_sum(shared + shared)
    nodes = list(Tape(loss))
    assert len(nodes) == len({id(n) for n in nodes})
    position = {id(n): i for i, n in enumerate(nodes)}
    assert position[id(x)] < position[id(shared)] < position[id(loss)]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert y.is_leaf


def test_ndarray_on_the_left_dispatches_to_tensor():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = np.array([2.0, 3.0]) * x
    assert isinstance(y, Tensor)
    backward(tensor_sum(y))
    np.testing.assert_array_equal(x.grad, [2.0, 3.0])


def test_check_finite_flags_non_finite_results():
    with check_finite(True):
        with pytest.raises(NumericalError):
            log(np.array([-1.0]))
    # outside the context the assertion is off again
    assert np.isnan(log(np.array([-1.0])).data[0])


@pytest.mark.parametrize("trial", range(40))
def test_elementwise_gradients_match_finite_differences(trial, finite_difference):
    local = np.random.default_rng(trial)
    x0 = local.uniform(0.5, 2.0, size=(2, 3))
    w = local.normal(size=(2, 3))

    def forward(t):
        return tensor_sum(mul(sqrt(t) + exp(t * 0.3) / (t + 1.0), w) + log(t) - (t ** 3) * 0.1)

    x = Tensor(x0, requires_grad=True)
    backward(forward(x))
    numeric = finite_difference(lambda a: float(forward(Tensor(a)).data), x0)
    np.testing.assert_allclose(x.grad, numeric, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("trial", range(40))
def test_cross_entropy_gradient_matches_finite_differences(trial, finite_difference):
    local = np.random.default_rng(100 + trial)
    logits0 = local.normal(scale=3.0, size=(4, 5))
    y = local.integers(5, size=4)

    logits = Tensor(logits0, requires_grad=True)
    backward(softmax_cross_entropy(logits, y))
    numeric = finite_difference(lambda a: float(softmax_cross_entropy(a, y).data), logits0)
    np.testing.assert_allclose(logits.grad, numeric, rtol=1e-6, atol=1e-9)

    picked = Tensor(logits0, requires_grad=True)
    backward(mean(pick(log_softmax(picked), y)))
    numeric = finite_difference(lambda a: float(mean(pick(log_softmax(a), y)).data), logits0)
    np.testing.assert_allclose(picked.grad, numeric, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("trial", range(20))
def test_conv_pool_matmul_gradients_match_finite_differences(trial, finite_difference):
    local = np.random.default_rng(200 + trial)
    x0 = local.normal(size=(2, 2, 4, 4))
    k0 = local.normal(size=(3, 2, 3, 3))
    w0 = local.normal(size=(3, 2))

    def forward(x, k, w):
        hidden = relu(conv2d(x, k) + 0.1)
        flat = reshape(hidden, (2, -1))
        return tensor_sum(matmul(global_avg_pool(hidden), w)) + mean(flat * flat) * 0.01

    x, k, w = (Tensor(a, requires_grad=True) for a in (x0, k0, w0))
    backward(forward(x, k, w))
    np.testing.assert_allclose(
        x.grad, finite_difference(lambda a: float(forward(a, k0, w0).data), x0), rtol=1e-4, atol=1e-7)
    np.testing.assert_allclose(
        k.grad, finite_difference(lambda a: float(forward(x0, a, w0).data), k0), rtol=1e-4, atol=1e-7)
    np.testing.assert_allclose(
        w.grad, finite_difference(lambda a: float(forward(x0, k0, a).data), w0), rtol=1e-4, atol=1e-7)
