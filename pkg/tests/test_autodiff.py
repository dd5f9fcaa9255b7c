import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atas.autodiff import (Graph, GraphError, NonFiniteError, ShapeError, backward, forward,
                           grad_check)
from opcases import OP_CASES


def square_graph():
    g = Graph()
    x = g.input("x")
    g.set_loss(g.sum(g.mul(x, x)))
    return g, x


def test_square_forward_and_backward():
    g, x = square_graph()
    vals = forward(g, {x: np.array(3.0)})
    assert vals[g.loss] == 9.0
    assert backward(g, vals)[x] == pytest.approx(6.0)


def test_zero_weight_xent_is_log_k():
    g = Graph()
    x, w, y = g.input("x"), g.param("w"), g.const("y")
    g.set_loss(g.softmax_xent(g.matmul(x, w), y))
    vals = forward(g, {x: np.ones((1, 3)), w: np.zeros((3, 4)), y: np.array([2])})
    assert vals[g.loss] == pytest.approx(math.log(4), abs=1e-12)


def test_matmul_identity():
    g = Graph()
    a, b = g.input("a"), g.input("b")
    out = g.matmul(a, b)
    g.set_loss(g.sum(out))
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(forward(g, {a: A, b: np.eye(2)})[out], A)


def test_xent_gradient_is_softmax_minus_onehot(rng):
    z = rng.standard_normal((1, 5))
    g = Graph()
    zn, y = g.input("z"), g.const("y")
    g.set_loss(g.softmax_xent(zn, y))
    grad = backward(g, forward(g, {zn: z, y: np.array([3])}))[zn]
    p = np.exp(z - z.max())
    p /= p.sum()
    p[0, 3] -= 1
    assert np.allclose(grad, p, atol=1e-14)


def test_three_layer_mlp_matches_finite_differences(rng):
    g = Graph()
    x, y = g.input("x"), g.const("y")
    h = x
    bind = {x: rng.standard_normal((3, 5)), y: rng.integers(0, 4, 3)}
    for i, (a, b) in enumerate([(5, 6), (6, 6), (6, 4)]):
        w = g.param(f"w{i}")
        bind[w] = rng.standard_normal((a, b))
        h = g.matmul(h, w)
        if i < 2:
            h = g.relu(h)
    g.set_loss(g.softmax_xent(h, y))
    assert grad_check(g, bind) < 1e-4


def test_grad_check_exact_on_linear_and_constant(rng):
    g = Graph()
    x, w = g.input("x"), g.param("w")
    g.set_loss(g.sum(g.matmul(x, w)))
    assert grad_check(g, {x: rng.standard_normal((2, 3)), w: rng.standard_normal((3, 2))}) < 1e-8
    g2 = Graph()
    x2 = g2.input("x")
    g2.set_loss(g2.scale(g2.sum(x2), 0.0))
    assert grad_check(g2, {x2: rng.standard_normal(4)}) == 0.0


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradients(op):
    rng = np.random.default_rng(7)
    for _ in range(5):
        assert grad_check(*OP_CASES[op](rng)) < 1e-4


def test_shape_mismatch_raises():
    g = Graph()
    a, b = g.input("a"), g.input("b")
    g.set_loss(g.sum(g.matmul(a, b)))
    with pytest.raises(ShapeError):
        forward(g, {a: np.ones((2, 3)), b: np.ones((2, 3))})


def test_non_finite_raises():
    g, x = square_graph()
    with pytest.raises(NonFiniteError):
        forward(g, {x: np.array([np.inf])})


def test_missing_binding_or_loss_raises():
    g, x = square_graph()
    with pytest.raises((GraphError, KeyError)):
        forward(g, {})
    g2 = Graph()
    g2.input("x")
    with pytest.raises(GraphError):
        backward(g2, forward(g2, {0: np.ones(2)}))


def test_invalid_step_raises():
    g, x = square_graph()
    with pytest.raises(ValueError):
        grad_check(g, {x: np.ones(2)}, step=0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(-3, 3))
def test_scale_is_linear(xs, c):
    g = Graph()
    x = g.input("x")
    g.set_loss(g.sum(g.scale(x, c)))
    arr = np.array(xs)
    vals = forward(g, {x: arr})
    assert vals[g.loss] == pytest.approx(c * arr.sum(), abs=1e-9)
    assert np.allclose(backward(g, vals)[x], c)
