import logging

import numpy as np
import pytest

from src.errors import DimensionError
from src.optim import AdamWHyper, AdamWState, adamw_step


def test_zero_gradient_leaves_parameters():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamWState.zeros_like(params)

    new, state = adamw_step(params, {"w": np.zeros(2)}, state, lr=0.1)

    np.testing.assert_array_equal(new["w"], params["w"])
    assert state.step == 1


def test_first_step_moves_by_lr_times_sign():
    params = {"w": np.array([1.0, 1.0, 1.0])}
    grads = {"w": np.array([3.0, -0.5, 1e-3])}

    new, _ = adamw_step(params, grads, AdamWState.zeros_like(params), lr=0.01)

    np.testing.assert_allclose(new["w"], 1.0 - 0.01 * np.sign(grads["w"]), rtol=1e-6)


def test_update_magnitude_is_bounded_by_lr(rng):
    params = {"w": rng.normal(size=10)}
    state = AdamWState.zeros_like(params)

    for _ in range(50):
        grads = {"w": rng.normal(scale=5.0, size=10)}
        new, state = adamw_step(params, grads, state, lr=1e-3)
        assert np.max(np.abs(new["w"] - params["w"])) <= 1e-3 * 3.5
        params = new


def test_converges_on_a_quadratic():
    target = np.array([0.5, -1.5, 2.0])
    params = {"w": np.zeros(3)}
    state = AdamWState.zeros_like(params)

    for step in range(500):
        lr = 0.1 if step < 300 else 0.01
        grads = {"w": 2.0 * (params["w"] - target)}
        params, state = adamw_step(params, grads, state, lr=lr)

    np.testing.assert_allclose(params["w"], target, atol=1e-2)


def test_decoupled_weight_decay():
    params = {"w": np.array([2.0])}
    hyper = AdamWHyper(weight_decay=0.1)

    state = AdamWState.zeros_like(params)
    new, _ = adamw_step(params, {"w": np.zeros(1)}, state, lr=0.5, hyper=hyper)

    np.testing.assert_allclose(new["w"], [2.0 * (1.0 - 0.05)])


def test_non_finite_gradient_skips_the_step(caplog):
    params = {"w": np.ones(2), "b": np.zeros(1)}
    state = AdamWState.zeros_like(params)

    with caplog.at_level(logging.WARNING, logger="src.optim"):
        grads = {"w": np.array([np.nan, 1.0]), "b": np.ones(1)}
        new, after = adamw_step(params, grads, state, lr=0.1)

    assert new is params
    assert after.step == 0 and after.skipped == 1
    assert "skipped" in caplog.text


def test_gradient_shape_mismatch():
    params = {"w": np.ones(3)}
    with pytest.raises(DimensionError):
        adamw_step(params, {"w": np.ones(2)}, AdamWState.zeros_like(params), lr=0.1)
