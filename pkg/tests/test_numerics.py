import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storycut.numerics import (
    OptimConfig,
    ParamStore,
    ShapeError,
    activation,
    grad_check,
    sgd_momentum_step,
    sigmoid,
    tanh,
)


def test_activation_fixed_points():
    assert sigmoid(0.0) == 0.5
    assert tanh(0.0) == 0.0
    assert activation(0.0, "sigmoid") == 0.5
    with pytest.raises(ValueError):
        activation(0.0, "relu")


def test_sigmoid_symmetry():
    x = 1.7
    assert sigmoid(-x) == pytest.approx(1.0 - sigmoid(x), abs=1e-15)
    assert sigmoid(x) == pytest.approx(1.0 / (1.0 + math.exp(-x)), rel=1e-15)


def test_activations_saturate_without_overflow():
    big = np.array([-1e308, -800.0, 800.0, 1e308])
    with np.errstate(all="raise"):
        s = sigmoid(big)
        t = tanh(big)
    assert np.all(np.isfinite(s)) and np.all(np.isfinite(t))
    np.testing.assert_array_equal(s, [0.0, 0.0, 1.0, 1.0])


@given(st.floats(-10, 10), st.floats(1e-3, 5))
def test_activations_monotone(x, d):
    y = x + d
    assert sigmoid(x) < sigmoid(y)
    assert tanh(x) < tanh(y)


def scalar_store(w=1.0, g=0.5):
    s = ParamStore()
    s.add("w", [[w]])
    s.grad("w")[...] = g
    return s


def test_sgd_zero_gradient_is_fixed_point():
    s = ParamStore()
    s.add("a", np.arange(6.0).reshape(2, 3))
    before = s.value("a").copy()
    sgd_momentum_step(s, OptimConfig(0.1, 0.9, 0.0))
    np.testing.assert_array_equal(s.value("a"), before)


def test_sgd_scalar_steps():
    s = scalar_store()
    cfg = OptimConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    sgd_momentum_step(s, cfg)
    assert s.velocity("w")[0, 0] == pytest.approx(-0.05, abs=1e-15)
    assert s.value("w")[0, 0] == pytest.approx(0.95, abs=1e-15)
    assert s.grad("w")[0, 0] == 0.0
    s.grad("w")[...] = 0.5
    sgd_momentum_step(s, cfg)
    assert s.velocity("w")[0, 0] == pytest.approx(-0.095, abs=1e-15)
    assert s.value("w")[0, 0] == pytest.approx(0.855, abs=1e-15)


def test_sgd_coupled_weight_decay():
    s = scalar_store(w=2.0, g=0.0)
    sgd_momentum_step(s, OptimConfig(0.1, 0.0, 0.5))
    # v = -0.1 * (0 + 0.5 * 2)
    assert s.value("w")[0, 0] == pytest.approx(1.9)


def test_sgd_rejects_shape_mismatch():
    s = scalar_store()
    s.entry("w").grad = np.zeros((2, 2))
    with pytest.raises(ShapeError):
        sgd_momentum_step(s, OptimConfig())


@pytest.mark.parametrize("kw", [dict(learning_rate=-1), dict(momentum=1.0), dict(weight_decay=-0.1)])
def test_optim_config_validation(kw):
    with pytest.raises(ValueError):
        OptimConfig(**kw)


def test_param_store_names_unique_and_shapes_shared():
    s = ParamStore()
    s.add("a", np.zeros(3))
    assert s.value("a").shape == (1, 3)
    assert s.grad("a").shape == s.velocity("a").shape == (1, 3)
    with pytest.raises(KeyError):
        s.add("a", np.zeros(3))
    with pytest.raises(ValueError):
        s.add("bad", [np.nan])


def quadratic_loss(store):
    w = store.value("w")
    store.zero_grad()
    store.grad("w")[...] = w
    return float(0.5 * np.sum(w * w))


def test_grad_check_quadratic():
    s = ParamStore()
    s.add("w", np.random.default_rng(0).normal(size=(3, 4)))
    assert grad_check(quadratic_loss, s, eps=1e-5) <= 1e-8


def test_grad_check_constant_loss():
    s = ParamStore()
    s.add("w", np.ones((2, 2)))

    def const(store):
        store.zero_grad()
        return 3.0

    assert grad_check(const, s, eps=1e-5) <= 1e-8


def test_grad_check_detects_wrong_gradient():
    s = ParamStore()
    s.add("w", np.ones((1, 3)))

    def wrong(store):
        store.grad("w")[...] = 2.0 * store.value("w")
        return float(0.5 * np.sum(store.value("w") ** 2))

    assert grad_check(wrong, s) > 0.1


def test_grad_check_rejects_non_finite_loss():
    s = ParamStore()
    s.add("w", np.ones((1, 1)))
    with pytest.raises(FloatingPointError):
        grad_check(lambda st: float("nan"), s)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zero_grad_momentum_fixed_point_any_shape(seed):
    rng = np.random.default_rng(seed)
    s = ParamStore()
    s.add("x", rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5)))))
    before = s.value("x").copy()
    for _ in range(3):
        sgd_momentum_step(s, OptimConfig(0.3, 0.5, 0.0))
    np.testing.assert_array_equal(before, s.value("x"))
