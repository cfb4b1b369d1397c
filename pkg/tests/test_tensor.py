import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from granatt import ShapeError, Tensor, no_grad
from granatt.tensor import add, clamp, elementwise, log, mul, relu, sigmoid, stack_sum, tmean, tsum

from oracles import broadcast_mul_loop

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_data_is_float64_and_grad_matches_shape():
    t = Tensor([[1, 2, 3]], requires_grad=True)
    assert t.data.dtype == np.float64
    assert t.size == int(np.prod(t.shape)) == 3
    (t * t).sum().backward()
    assert t.grad.shape == t.shape


def test_sum_backward_gives_ones():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    a.sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))


def test_sum_of_square_gives_two_a():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    (a * a).sum().backward()
    np.testing.assert_allclose(a.grad, 2 * a.data, rtol=0, atol=0)


def test_backward_accumulates_additively():
    a = Tensor([1.0, -2.0], requires_grad=True)
    loss = (a * 3.0).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(a.grad, [6.0, 6.0])
    a.zero_grad()
    assert a.grad is None


def test_non_scalar_backward_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (a * 2.0).backward()


def test_shared_subgraph_gradients_add_up():
    a = Tensor(2.0, requires_grad=True)
    b = a * a
    (b + b * a).backward()  # a^2 + a^3
    assert a.grad == pytest.approx(2 * 2.0 + 3 * 4.0)


def test_only_requires_grad_leaves_receive_gradients():
    a = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    (a * c).sum().backward()
    assert c.grad is None
    np.testing.assert_array_equal(a.grad, [3.0, 4.0])


def test_no_grad_records_nothing():
    a = Tensor([1.0], requires_grad=True)
    with no_grad():
        b = a * 2.0
    assert not b.requires_grad and b.is_leaf


def test_no_grad_is_thread_local():
    a = Tensor([1.0], requires_grad=True)
    seen = {}

    def worker():
        seen["b"] = (a * 2.0).requires_grad

    with no_grad():
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert seen["b"] is True


def test_deep_chain_does_not_recurse():
    a = Tensor(1.0, requires_grad=True)
    x = a
    for _ in range(5000):
        x = x + 0.0
    x.backward()
    assert a.grad == 1.0


# -- elementwise ---------------------------------------------------------------


def test_sigmoid_zero_is_half():
    np.testing.assert_array_equal(sigmoid(Tensor(np.zeros((2, 3)))).data, 0.5)


def test_mul_by_ones_is_identity():
    a = np.random.default_rng(1).standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(elementwise("mul", Tensor(a), Tensor(np.ones_like(a))).data, a)


def test_broadcast_attention_matches_loop():
    rng = np.random.default_rng(2)
    att, x = rng.random((5, 1, 1)), rng.standard_normal((5, 4, 6))
    np.testing.assert_allclose(mul(Tensor(att), Tensor(x)).data, broadcast_mul_loop(att, x), atol=1e-15)


def test_broadcast_gradient_is_reduced_over_expanded_axes():
    rng = np.random.default_rng(3)
    att = Tensor(rng.random((1, 3, 1, 1)), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    (att * x).sum().backward()
    np.testing.assert_allclose(att.grad[0, :, 0, 0], x.data.sum(axis=(0, 2, 3)))


@pytest.mark.parametrize("a,b", [((2, 3), (3, 2)), ((2, 3, 4), (3, 4)), ((4,), (2, 4))])
def test_incompatible_shapes_raise(a, b):
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(a)), Tensor(np.ones(b)))


def test_elementwise_dispatch_errors():
    with pytest.raises(ValueError):
        elementwise("mul", Tensor(1.0))
    with pytest.raises(ValueError):
        elementwise("pow", Tensor(1.0), Tensor(2.0))


def test_sigmoid_extremes_finite():
    s = sigmoid(Tensor([-1000.0, -40.0, 0.0, 40.0, 1000.0])).data
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_sigmoid_in_open_unit_interval(x):
    s = sigmoid(Tensor(x)).data
    assert np.all(s > 0) and np.all(s < 1)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite), arrays(np.float64, (2, 5), elements=finite))
def test_product_rule(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    (ta * tb + ta).sum().backward()
    np.testing.assert_array_equal(ta.grad, b + 1.0)
    np.testing.assert_array_equal(tb.grad, a)


def test_relu_clamp_log_gradients():
    x = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
    (relu(x) + clamp(x, 0.0, 1.0) + log(clamp(x, 0.1, 10.0))).sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 1 + 1 + 2.0, 1 + 0 + 0.5])


def test_division_and_reductions():
    x = Tensor(np.arange(1.0, 7.0).reshape(2, 3), requires_grad=True)
    y = tmean(1.0 / x, axis=1)
    assert y.shape == (2,)
    tsum(y).backward()
    np.testing.assert_allclose(x.grad, -1.0 / x.data ** 2 / 3)


def test_getitem_and_reshape_route_gradients():
    x = Tensor(np.arange(6.0), requires_grad=True)
    (x.reshape(2, 3)[1] * 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 0, 2, 2, 2])


def test_stack_sum():
    parts = [Tensor(np.full(3, float(i))) for i in range(4)]
    np.testing.assert_array_equal(stack_sum(parts).data, 6.0)
