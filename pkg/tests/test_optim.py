import numpy as np
import pytest

from erlhead.optim import TrainConfig, adam_step, fill_missing_grads, scheduled_lr
from erlhead.tensor import ParamStore


def _store(value, grad):
    s = ParamStore()
    p = s.add("p", value, dtype=np.float64)
    p.grad = np.array(grad, dtype=np.float64)
    return s, p


def test_first_step_moves_by_lr_along_sign():
    s, p = _store([1.0, -2.0, 0.5], [0.3, -4.0, 1e-3])
    adam_step(s, lr=0.01)
    assert np.allclose(p.data, [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], atol=1e-7)


def test_zero_gradient_without_decay_keeps_params():
    s, p = _store([1.0, 2.0], [0.0, 0.0])
    adam_step(s, lr=0.1)
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adamw_decay_with_zero_gradient():
    s, p = _store([1.0, -3.0], [0.0, 0.0])
    adam_step(s, lr=0.1, weight_decay=0.5, decoupled=True)
    assert np.allclose(p.data, np.array([1.0, -3.0]) * (1 - 0.1 * 0.5))


def test_coupled_decay_differs_from_decoupled():
    s1, p1 = _store([1.0], [0.2])
    s2, p2 = _store([1.0], [0.2])
    adam_step(s1, lr=0.1, weight_decay=0.5, decoupled=True)
    adam_step(s2, lr=0.1, weight_decay=0.5, decoupled=False)
    assert p1.data[0] != p2.data[0]


def test_bias_correction_over_several_steps():
    s, p = _store([0.0], [1.0])
    for _ in range(5):
        p.grad = np.array([1.0])
        adam_step(s, lr=0.1)
    # constant gradient: every bias-corrected step is exactly lr
    assert np.allclose(p.data, [-0.5], atol=1e-6)
    assert s.step["p"] == 5


def test_missing_gradient_raises_and_fill_fixes_it():
    s = ParamStore()
    s.add("p", np.ones(2))
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(s, 0.1)
    fill_missing_grads(s)
    adam_step(s, 0.1)


def test_frozen_params_are_not_updated():
    s = ParamStore()
    s.add("frozen", np.ones(2), trainable=False)
    p = s.add("live", np.ones(2))
    p.grad = np.ones(2, dtype=np.float32)
    adam_step(s, 0.1)
    assert np.array_equal(s["frozen"].data, np.ones(2))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_nerf=-1)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")


def test_cosine_schedule_endpoints():
    assert scheduled_lr(1.0, 0, 100, "cosine") == 1.0
    assert scheduled_lr(1.0, 50, 100, "cosine") == pytest.approx(0.5)
    assert scheduled_lr(1.0, 100, 100, "cosine") == pytest.approx(0.0)
    assert scheduled_lr(1.0, 70, 100) == 1.0
