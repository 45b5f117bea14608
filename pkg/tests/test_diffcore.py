import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gap_priors.diffcore import (NonFiniteError, ScalarFn, Tape, finite_diff_grad, relative_error,
                                 softmax, value_and_grad)
from gap_priors.model import MlpSpec, init_mlp, xent_fn


def _fn(build, dim):
    return ScalarFn(build, dim)


def test_sqnorm_gradient_is_twice_input():
    f = _fn(lambda t, th, b: t.sqnorm(th), 3)
    value, grad = value_and_grad(f, [1.0, -2.0, 3.0], None)
    assert value == 14.0
    np.testing.assert_array_equal(grad, [2.0, -4.0, 6.0])


def test_xent_uniform_logits():
    # zero logits on 3 classes: loss log 3, gradient p - onehot
    def build(t, th, b):
        w = t.slice(th, 0, (3, 1))
        bias = t.slice(th, 3, (3,))
        z = t.affine(t.constant(np.zeros((1, 1))), w, bias)
        return t.softmax_xent(z, np.array([1]))

    value, grad = value_and_grad(_fn(build, 6), np.zeros(6), None)
    assert value == pytest.approx(np.log(3.0), abs=1e-15)
    np.testing.assert_allclose(grad[3:], [1 / 3, -2 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_array_equal(grad[:3], 0.0)


def test_xent_is_stable_for_huge_logits():
    def build(t, th, b):
        return t.softmax_xent(t.slice(th, 0, (1, 2)), np.array([0]))

    value, grad = value_and_grad(_fn(build, 2), [1000.0, 0.0], None)
    assert value == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(grad))
    value, _ = value_and_grad(_fn(build, 2), [0.0, 1000.0], None)
    assert value == pytest.approx(1000.0)


def test_relu_gradient_at_zero_is_zero():
    def build(t, th, b):
        r = t.relu(th)
        return t.add(t.slice(r, 0, ()), t.slice(r, 1, ()))

    f = _fn(build, 2)
    _, grad = value_and_grad(f, [0.0, 1.0], None)
    np.testing.assert_array_equal(grad, [0.0, 1.0])


def test_tanh_gradient():
    f = _fn(lambda t, th, b: t.slice(t.tanh(th), 0, ()), 1)
    _, grad = value_and_grad(f, [0.3], None)
    assert grad[0] == pytest.approx(1 - np.tanh(0.3) ** 2, rel=1e-14)


def test_scale_add_sub():
    def build(t, th, b):
        s = t.sqnorm(th)
        return t.sub(t.add(t.scale(s, 3.0), s), t.scale(s, 0.5))

    _, grad = value_and_grad(_fn(build, 2), [1.0, 2.0], None)
    np.testing.assert_allclose(grad, 3.5 * 2 * np.array([1.0, 2.0]))


def test_backward_needs_scalar_root():
    t = Tape()
    v = t.variable(np.ones(3))
    with pytest.raises(ValueError):
        t.backward(v)


def test_non_finite_node_is_named():
    def build(t, th, b):
        return t.sqnorm(th)

    with pytest.raises(NonFiniteError) as info:
        value_and_grad(_fn(build, 2), [1e200, 1.0], None)
    assert "sqnorm" in str(info.value)
    assert info.value.op == "sqnorm"


def test_non_finite_parameters_rejected():
    f = _fn(lambda t, th, b: t.sqnorm(th), 2)
    with pytest.raises(NonFiniteError):
        value_and_grad(f, [np.nan, 0.0], None)


def test_wrong_parameter_length():
    f = _fn(lambda t, th, b: t.sqnorm(th), 2)
    with pytest.raises(ValueError):
        value_and_grad(f, [1.0, 2.0, 3.0], None)


def test_relative_error_definition():
    assert relative_error([0, 0], [0, 0]) == 0.0
    assert relative_error([3, 4], [3, 4]) == 0.0
    assert relative_error([1, 0], [0, 0]) == 1.0
    assert relative_error([3, 4], [0, 0]) == 1.0


def test_finite_diff_exact_on_quadratic():
    f = lambda th, b: float(th @ th)
    np.testing.assert_allclose(finite_diff_grad(f, np.array([1.0, -2.0]), None), [2.0, -4.0], rtol=1e-10)
    with pytest.raises(ValueError):
        finite_diff_grad(f, np.zeros(2), None, step=0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
def test_softmax_is_a_distribution(z):
    p = softmax(np.array(z))
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_is_linear_in_the_loss(seed, a, b):
    # grad(a f + b g) == a grad f + b grad g
    r = np.random.default_rng(seed)
    th = r.standard_normal(4)

    def build(t, theta, batch):
        f = t.sqnorm(t.tanh(theta))
        g = t.sqnorm(t.relu(theta))
        return t.add(t.scale(f, a), t.scale(g, b))

    _, g_ab = value_and_grad(_fn(build, 4), th, None)
    _, g_f = value_and_grad(_fn(lambda t, x, _: t.sqnorm(t.tanh(x)), 4), th, None)
    _, g_g = value_and_grad(_fn(lambda t, x, _: t.sqnorm(t.relu(x)), 4), th, None)
    np.testing.assert_allclose(g_ab, a * g_f + b * g_g, atol=1e-12)


def test_mlp_gradient_matches_finite_differences():
    spec = MlpSpec((4, 6, 3), "tanh")
    r = np.random.default_rng(3)
    theta = init_mlp(spec, 3).theta + 0.1 * r.standard_normal(spec.n_params)
    batch = (r.standard_normal((7, 4)), r.integers(0, 3, 7))
    fn = xent_fn(spec)
    _, g = value_and_grad(fn, theta, batch)
    assert relative_error(g, finite_diff_grad(fn, theta, batch)) < 1e-7
