import numpy as np
import pytest

from novaug.optim import AdamW, OptimizerFault
from novaug.tensor import Tensor


def test_zero_grad_zero_decay_leaves_params_unchanged():
    p = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    opt = AdamW([p], lr=0.1)
    p.grad = np.zeros(3)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_first_step_matches_hand_evaluation():
    # scalar p, g=1, lr=0.1, betas=(0.9, 0.999), eps=1e-8, decay=0:
    # m_hat = v_hat = 1, so the step is lr / (1 + eps) ~= 0.1
    p = Tensor([0.5], requires_grad=True)
    opt = AdamW([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    expected = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8)
    np.testing.assert_allclose(p.data, [expected], rtol=0, atol=1e-15)
    assert abs((0.5 - p.data[0]) - 0.1) < 1e-8


def test_decay_with_zero_grad_is_pure_multiplicative_shrink():
    p = Tensor([2.0], requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.array([0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 * (1.0 - 0.1 * 0.5)], rtol=0, atol=0)


def test_nan_gradient_refuses_step():
    p = Tensor([1.0], requires_grad=True)
    opt = AdamW([p], lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(OptimizerFault):
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0])
    assert opt.t == 0


def test_state_roundtrip_continues_identically():
    rng = np.random.default_rng(0)
    p1 = Tensor(rng.standard_normal(4), requires_grad=True)
    p2 = Tensor(p1.data.copy(), requires_grad=True)
    opt1 = AdamW([p1], lr=0.01, weight_decay=0.01)
    opt2 = AdamW([p2], lr=0.01, weight_decay=0.01)
    grads = [rng.standard_normal(4) for _ in range(6)]
    for g in grads[:3]:
        p1.grad = g.copy()
        opt1.step()
        p2.grad = g.copy()
        opt2.step()
    saved = opt1.state_dict()
    p_saved = p1.data.copy()

    p3 = Tensor(p_saved.copy(), requires_grad=True)
    opt3 = AdamW([p3], lr=0.01, weight_decay=0.01)
    opt3.load_state_dict(saved)
    for g in grads[3:]:
        p2.grad = g.copy()
        opt2.step()
        p3.grad = g.copy()
        opt3.step()
    np.testing.assert_array_equal(p2.data, p3.data)


def test_descends_a_quadratic():
    p = Tensor([5.0], requires_grad=True)
    opt = AdamW([p], lr=0.05)
    for _ in range(400):
        p.grad = 2.0 * p.data  # d/dp p^2
        opt.step()
    assert abs(p.data[0]) < 0.05
