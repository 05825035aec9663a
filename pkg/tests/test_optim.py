"""Optimizer update rules against hand-computed oracles."""

import numpy as np
import pytest

from mlfd.errors import ConfigError
from mlfd.numerics import OptimizerState, Parameter, optimizer_step


def _param_with_grad(value, grad):
    p = Parameter(np.asarray(value, dtype=np.float64))
    p.value.grad[...] = grad
    return p


def test_sgd_definition():
    p = _param_with_grad([0.0], [1.0])
    optimizer_step(OptimizerState(kind="sgd", learning_rate=0.1), [p])
    assert np.allclose(p.value.data, [-0.1])
    assert np.array_equal(p.value.grad, [0.0])


def test_sgd_coupled_weight_decay():
    p = _param_with_grad([2.0], [0.0])
    optimizer_step(OptimizerState(kind="sgd", learning_rate=0.1, weight_decay=0.5), [p])
    assert np.allclose(p.value.data, [2.0 - 0.1 * 0.5 * 2.0])


def test_adam_single_step_scalar_oracle():
    w0, g, lr, b1, b2, eps = 0.5, 0.3, 0.01, 0.9, 0.999, 1e-8
    p = _param_with_grad([w0], [g])
    optimizer_step(OptimizerState(kind="adam", learning_rate=lr), [p])
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    expected = w0 - lr * m_hat / (np.sqrt(v_hat) + eps)
    assert np.allclose(p.value.data, [expected], atol=1e-15)


def test_adamw_decay_is_decoupled():
    w0, g, lr, wd = 1.0, 0.0, 0.1, 0.01
    p = _param_with_grad([w0], [g])
    optimizer_step(OptimizerState(kind="adamw", learning_rate=lr, weight_decay=wd), [p])
    # zero gradient: only the decoupled decay moves the weight
    assert np.allclose(p.value.data, [w0 - lr * wd * w0])


def test_frozen_parameter_bitwise_unchanged():
    p = Parameter(np.array([0.123456789, -9.87654321]), frozen=True)
    before = p.value.data.copy()
    state = OptimizerState(kind="adam", learning_rate=0.5, weight_decay=0.1)
    for _ in range(10):
        optimizer_step(state, [p])
    assert np.array_equal(p.value.data, before)


def test_step_count_increments():
    p = _param_with_grad([1.0], [0.1])
    state = OptimizerState(kind="sgd", learning_rate=0.1)
    for i in range(1, 4):
        optimizer_step(state, [p])
        assert state.step_count == i


def test_invalid_kind_rejected():
    with pytest.raises(ConfigError):
        OptimizerState(kind="rmsprop")


def test_adam_multi_step_matches_reference_loop():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(5)]
    p = Parameter(w.copy())
    state = OptimizerState(kind="adam", learning_rate=0.05)
    # independent reference implementation of bias-corrected Adam
    ref_w, m, v = w.copy(), np.zeros_like(w), np.zeros_like(w)
    for t, g in enumerate(grads, start=1):
        p.value.grad[...] = g
        optimizer_step(state, [p])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref_w -= 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.value.data, ref_w, atol=1e-12)
