import math

import numpy as np
import pytest

from sfim.errors import ConfigError
from sfim.optim import AdamW, AdamWState, OptimizerConfig, adamw_step, clip_grad_norm, cosine_lr, global_grad_norm
from sfim.tensor import parameter

LR_MAX, LR_MIN = 2e-4, 1e-7


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 100, LR_MAX, LR_MIN) == LR_MAX
    assert cosine_lr(100, 100, LR_MAX, LR_MIN) == pytest.approx(LR_MIN, abs=1e-18)
    assert cosine_lr(50, 100, LR_MAX, LR_MIN) == pytest.approx((LR_MAX + LR_MIN) / 2, rel=1e-12)


def test_cosine_is_nonincreasing():
    values = [cosine_lr(s, 37, LR_MAX, LR_MIN) for s in range(38)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_cosine_zero_length_phase():
    assert cosine_lr(0, 0, LR_MAX, LR_MIN) == LR_MAX


def test_first_step_moves_every_entry_by_lr():
    p = parameter([1.0, -2.0, 0.5])
    grads = {"p": np.array([0.3, -4.0, 1e-2])}
    adamw_step({"p": p}, grads, AdamWState(), lr=0.1, weight_decay=0.0)
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(p.data, [0.9, -1.9, 0.4], atol=1e-6)


def test_weight_decay_is_decoupled():
    p = parameter([2.0])
    adamw_step({"p": p}, {"p": np.array([0.0])}, AdamWState(), lr=0.1, weight_decay=0.5)
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.05)])


def test_step_counter_and_moments_advance():
    p = parameter(np.zeros(2))
    state = AdamWState.zeros_like({"p": p})
    for _ in range(3):
        adamw_step({"p": p}, {"p": np.ones(2)}, state, lr=1e-3)
    assert state.step == 3
    np.testing.assert_allclose(state.m["p"], 1 - 0.9 ** 3)
    np.testing.assert_allclose(state.v["p"], 1 - 0.999 ** 3)


def test_negative_step_counter_rejected():
    p = parameter([1.0])
    with pytest.raises(ConfigError):
        adamw_step({"p": p}, {"p": np.ones(1)}, AdamWState(step=-1), lr=1e-3)


def test_clip_scales_to_max_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_grad_norm(grads, 0.5)
    assert norm == pytest.approx(5.0)
    assert global_grad_norm(grads) == pytest.approx(0.5, rel=1e-9)


def test_clip_leaves_small_gradients():
    grads = {"a": np.array([0.1, 0.1])}
    clip_grad_norm(grads, 0.5)
    np.testing.assert_array_equal(grads["a"], [0.1, 0.1])


def test_optimizer_minimizes_a_quadratic():
    p = parameter([3.0, -2.0])
    opt = AdamW({"p": p}, OptimizerConfig(weight_decay=0.0, clip_norm=None))
    for _ in range(400):
        opt.zero_grad()
        p.grad = 2.0 * p.data
        opt.step(0.05)
    assert np.all(np.abs(p.data) < 0.05)


def test_state_copy_is_deep():
    state = AdamWState(step=2, m={"p": np.ones(2)}, v={"p": np.ones(2)})
    clone = state.copy()
    clone.m["p"][0] = 5.0
    assert state.m["p"][0] == 1.0
    assert math.isclose(clone.v["p"][1], 1.0)


def reference_adamw(p, steps, lr, beta1=0.9, beta2=0.999, weight_decay=0.01, eps=1e-8):
    """Scalar AdamW on f(p) = p**2, written out term by term."""
    m = v = 0.0
    trajectory = []
    for t in range(1, steps + 1):
        g = 2.0 * p
        p = p - lr * weight_decay * p
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
        trajectory.append(p)
    return trajectory


def test_trajectory_matches_reference():
    p = parameter([1.0])
    state = AdamWState()
    trajectory = []
    for _ in range(10):
        adamw_step({"p": p}, {"p": 2.0 * p.data.copy()}, state, lr=0.1, weight_decay=0.01)
        trajectory.append(float(p.data[0]))
    np.testing.assert_allclose(trajectory, reference_adamw(1.0, 10, lr=0.1), rtol=0, atol=1e-12)
