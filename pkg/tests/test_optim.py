import numpy as np
import pytest

from objvid.optim import AdamW, adamw_step, clip_grad_norm
from objvid.tensor import parameter


def test_zero_grad_zero_decay_is_fixed_point(rng):
    p = rng.normal(size=5)
    m = v = np.zeros(5)
    for step in range(1, 10):
        p2, m, v = adamw_step(p, np.zeros(5), m, v, step, lr=1e-2)
        np.testing.assert_array_equal(p2, p)


def test_constant_gradient_unit_step():
    # scalar simulation: the bias-corrected update tends to lr * sign(g)
    p, m, v = np.array([0.0]), np.zeros(1), np.zeros(1)
    lr = 1e-3
    for step in range(1, 1001):
        new, m, v = adamw_step(p, np.array([3.7]), m, v, step, lr=lr)
        delta = p - new
        p = new
    assert delta[0] == pytest.approx(lr, rel=1e-6)


def test_decay_only_is_multiplicative_shrink(rng):
    p = rng.normal(size=4)
    m = v = np.zeros(4)
    lr, wd = 0.1, 0.01
    cur = p.copy()
    for step in range(1, 6):
        cur, m, v = adamw_step(cur, np.zeros(4), m, v, step, lr=lr, weight_decay=wd)
    np.testing.assert_allclose(cur, p * (1 - lr * wd) ** 5, rtol=1e-15)


def test_first_step_matches_hand_formula():
    p, g = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    new, m, v = adamw_step(p, g, np.zeros(2), np.zeros(2), 1, lr=0.1, weight_decay=0.2)
    # bias-corrected m_hat = g, v_hat = g^2 on the first step
    expected = p * (1 - 0.1 * 0.2) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(new, expected, rtol=1e-15)
    np.testing.assert_allclose(m, 0.1 * g)
    np.testing.assert_allclose(v, 0.001 * g * g)


def test_class_matches_function(rng):
    a = parameter(rng.normal(size=3))
    ref = a.data.copy()
    opt = AdamW({"a": a}, lr=0.05, weight_decay=0.1)
    m = v = np.zeros(3)
    for step in range(1, 4):
        g = rng.normal(size=3)
        a.grad = g.copy()
        opt.step()
        ref, m, v = adamw_step(ref, g, m, v, step, 0.05, weight_decay=0.1)
        np.testing.assert_array_equal(a.data, ref)
    opt.zero_grad()
    assert a.grad is None


def test_clip_grad_norm(rng):
    a, b = parameter(np.zeros(3)), parameter(np.zeros(2))
    a.grad, b.grad = np.array([3.0, 0.0, 0.0]), np.array([0.0, 4.0])
    total = clip_grad_norm({"a": a, "b": b}, 1.0)
    assert total == 5.0
    assert np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum()) == pytest.approx(1.0, rel=1e-12)
    a.grad = np.array([0.1, 0.0, 0.0])
    b.grad = None
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(0.1)
    np.testing.assert_array_equal(a.grad, [0.1, 0, 0])
