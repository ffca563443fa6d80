import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from albert_lab.optim import LambConfig, NonFiniteGradientError, OptimizerState, Schedule, lamb_step, lr_at_step


def one_step(w, g, lr=0.1, **hp):
    params = {"w": np.array(w, dtype=np.float64)}
    state = OptimizerState.create(params, LambConfig(**hp))
    ratios = lamb_step(params, {"w": np.array(g, dtype=np.float64)}, state, lr)
    return params["w"], state, ratios["w"]


def scalar_oracle(w, g, lr, b1, b2, eps, t=1):
    """Single scalar LAMB step in exact rationals; sqrt is only taken of perfect squares here."""
    w, g, lr, b1, b2, eps = map(Fraction, (w, g, lr, b1, b2, eps))
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    root = Fraction(int(v_hat.numerator ** 0.5), int(v_hat.denominator ** 0.5))
    assert root * root == v_hat
    u = m_hat / (root + eps)
    ratio = abs(w) / abs(u)
    return float(w - lr * ratio * u), float(ratio)


def test_hand_traced_scalar_step():
    expected, ratio = scalar_oracle(1, 1, "0.1", "0.9", "0.999", "1e-6")
    assert expected == pytest.approx(0.9, abs=1e-15)
    assert ratio == pytest.approx(1.000001, abs=1e-12)
    w, state, r = one_step([1.0], [1.0], lr=0.1, weight_decay=0.0)
    assert abs(w[0] - expected) <= 1e-12
    assert abs(r - ratio) <= 1e-12
    assert state.step == 1
    assert state.m["w"][0] == pytest.approx(0.1, abs=1e-15) and state.v["w"][0] == pytest.approx(0.001, abs=1e-15)


def test_zero_grad_fixpoint():
    w0 = np.random.default_rng(0).normal(size=(3, 4))
    w, state, _ = one_step(w0, np.zeros((3, 4)), weight_decay=0.0)
    assert np.array_equal(w, w0) and state.step == 1


def test_zero_norm_weight_uses_ratio_one():
    g = np.array([0.5, -2.0, 1.0])
    w, _, r = one_step(np.zeros(3), g, lr=0.01, weight_decay=0.0, eps=1e-6)
    assert r == 1.0
    adaptive = g / (np.abs(g) + 1e-6)  # first bias-corrected step: m_hat = g, sqrt(v_hat) = |g|
    assert np.allclose(w, -0.01 * adaptive, atol=1e-15, rtol=0)


def test_trust_ratio_clipping():
    _, _, r = one_step([1000.0, 0.0], [1.0, 0.0], weight_decay=0.0)
    assert r == 10.0


def test_scale_direction_property():
    rng = np.random.default_rng(1)
    w0, grads = rng.normal(size=(5, 3)), [rng.normal(size=(5, 3)) for _ in range(4)]
    steps = []
    for c in (1.0, 7.5):
        params = {"w": c * w0}
        state = OptimizerState.create(params, LambConfig(weight_decay=0.0, eps=0.0))
        for g in grads:
            before = params["w"].copy()
            lamb_step(params, {"w": c * g}, state, 0.01)
        steps.append((params["w"] - before) / c)
    assert np.allclose(steps[0], steps[1], atol=1e-12, rtol=0)


def test_reduces_to_adam_when_ratio_forced_to_one():
    rng = np.random.default_rng(2)
    w0 = rng.normal(size=6)
    params = {"w": w0.copy()}
    state = OptimizerState.create(params, LambConfig(weight_decay=0.0, clip_lo=1.0, clip_hi=1.0))
    ref, m, v = w0.copy(), np.zeros(6), np.zeros(6)
    for t in range(1, 21):
        g = rng.normal(size=6)
        lamb_step(params, {"w": g}, state, 0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-6)
    assert np.allclose(params["w"], ref, atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.integers(1, 5))
def test_second_moment_nonnegative(g, n):
    params = {"w": np.ones(3)}
    state = OptimizerState.create(params)
    for _ in range(n):
        lamb_step(params, {"w": np.array(g)}, state, 1e-3)
        assert np.all(state.v["w"] >= 0)


def test_non_finite_gradient_aborts_before_update():
    params = {"a": np.ones(2), "b": np.ones(2)}
    state = OptimizerState.create(params)
    with pytest.raises(NonFiniteGradientError, match="b"):
        lamb_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state, 0.1)
    assert np.array_equal(params["a"], np.ones(2)) and state.step == 0 and not state.m["a"].any()


def test_exclusion_flag():
    params = {"x.weight": np.ones(2), "x.bias": np.ones(2)}
    state = OptimizerState.create(params, LambConfig(exclude_norm_and_bias=True, weight_decay=0.5))
    ratios = lamb_step(params, {"x.weight": np.ones(2), "x.bias": np.ones(2)}, state, 0.1)
    assert ratios["x.bias"] == 1.0
    assert np.allclose(params["x.bias"], 1 - 0.1 / (1 + 1e-6), atol=1e-15)


def test_state_roundtrip():
    params = {"w": np.ones(2)}
    state = OptimizerState.create(params)
    lamb_step(params, {"w": np.array([0.3, -0.1])}, state, 0.1)
    back = OptimizerState.from_arrays(state.to_arrays())
    assert back.step == 1 and np.array_equal(back.m["w"], state.m["w"]) and np.array_equal(back.v["w"], state.v["w"])


# -- schedule -----------------------------------------------------------

def test_schedule_points(caplog):
    s = Schedule(peak_lr=0.00176, warmup_steps=100, total_steps=1000)
    assert lr_at_step(s, 0) == 0.0
    assert lr_at_step(s, 100) == 0.00176
    assert lr_at_step(s, 1000) == 0.0
    assert lr_at_step(s, 50) == pytest.approx(0.00088, abs=1e-18)
    assert lr_at_step(s, 550) == pytest.approx(0.00088, abs=1e-18)
    with caplog.at_level(logging.WARNING):
        assert lr_at_step(s, 1001) == 0.0
    assert "clamped" in caplog.text


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(peak_lr=0.0)
    with pytest.raises(ValueError):
        Schedule(warmup_steps=0)
    with pytest.raises(ValueError):
        Schedule(warmup_steps=10, total_steps=5)
    assert lr_at_step(Schedule(peak_lr=1.0, warmup_steps=5, total_steps=5), 5) == 1.0
