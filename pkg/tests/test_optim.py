import logging

import numpy as np
import pytest

from mmgrad.autodiff import Tensor
from mmgrad.optim import adamw_step, init_state


def scalar_params(value=1.0):
    return {"w": Tensor(np.array([value]), requires_grad=True)}


class TestAdamW:
    def test_zero_grad_zero_decay_leaves_params(self):
        params = scalar_params(0.7)
        state = init_state(params)
        ok = adamw_step(params, {"w": np.zeros(1)}, state, lr=0.1)
        assert ok
        assert params["w"].data[0] == 0.7

    def test_first_step_with_unit_gradient(self):
        # m_hat = v_hat = 1 after bias correction, so the update is
        # -lr / (1 + eps), i.e. almost exactly -lr
        lr = 0.05
        params = scalar_params(0.0)
        state = init_state(params)
        adamw_step(params, {"w": np.ones(1)}, state, lr=lr, eps=1e-8)
        expected = -lr * 1.0 / (1.0 + 1e-8)
        assert params["w"].data[0] == pytest.approx(expected, rel=1e-12)

    def test_hand_evaluated_two_steps(self):
        # recurrences evaluated by hand for g = 1 then g = 2
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        params = scalar_params(0.0)
        state = init_state(params)
        adamw_step(params, {"w": np.ones(1)}, state, lr=lr, betas=(b1, b2), eps=eps)
        adamw_step(params, {"w": 2 * np.ones(1)}, state, lr=lr, betas=(b1, b2), eps=eps)

        m = (1 - b1) * 1.0
        v = (1 - b2) * 1.0
        x = -lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        m = b1 * m + (1 - b1) * 2.0
        v = b2 * v + (1 - b2) * 4.0
        x -= lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
        assert params["w"].data[0] == pytest.approx(x, rel=1e-12)

    def test_decoupled_decay_with_zero_grads(self):
        lr, wd = 0.1, 0.5
        params = scalar_params(2.0)
        state = init_state(params)
        adamw_step(params, {"w": np.zeros(1)}, state, lr=lr, weight_decay=wd)
        assert params["w"].data[0] == pytest.approx(2.0 * (1 - lr * wd), rel=1e-14)

    def test_non_finite_gradient_skips_step(self, caplog):
        params = scalar_params(1.0)
        state = init_state(params)
        with caplog.at_level(logging.WARNING):
            ok = adamw_step(params, {"w": np.array([np.nan])}, state, lr=0.1)
        assert not ok
        assert params["w"].data[0] == 1.0
        assert state.step == 0
        assert "non-finite" in caplog.text

    def test_shape_mismatch_rejected(self):
        params = scalar_params()
        state = init_state(params)
        with pytest.raises(ValueError, match="shape"):
            adamw_step(params, {"w": np.zeros(2)}, state, lr=0.1)

    def test_positive_lr_required(self):
        params = scalar_params()
        with pytest.raises(ValueError, match="learning rate"):
            adamw_step(params, {"w": np.zeros(1)}, init_state(params), lr=0.0)
