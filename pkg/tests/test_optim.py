import numpy as np
import pytest

from splitmix.errors import NumericsError
from splitmix.nn.optim import SGD


def test_plain_step_without_momentum_or_decay():
    p = {"w": np.array([1.0])}
    g = {"w": np.array([0.5])}
    SGD(momentum=0.0, weight_decay=0.0).step(p, g, lr=0.1)
    np.testing.assert_allclose(p["w"], [0.95], rtol=0, atol=0)


def test_momentum_recurrence_matches_hand_unrolled_sequence():
    opt = SGD(momentum=0.9, weight_decay=0.0)
    p = {"w": np.array([0.0])}
    g1, g2 = 0.3, -0.2
    opt.step(p, {"w": np.array([g1])}, lr=1.0)
    v1 = g1
    np.testing.assert_allclose(p["w"], [-v1], rtol=1e-15)
    opt.step(p, {"w": np.array([g2])}, lr=1.0)
    v2 = 0.9 * v1 + g2
    np.testing.assert_allclose(p["w"], [-v1 - v2], rtol=1e-15)


def test_weight_decay_adds_scaled_parameter_to_gradient():
    p = {"w": np.array([2.0])}
    SGD(momentum=0.0, weight_decay=5e-4).step(p, {"w": np.array([0.0])}, lr=1.0)
    np.testing.assert_allclose(p["w"], [2.0 - 5e-4 * 2.0], rtol=1e-15)


def test_updates_are_in_place_so_views_write_through():
    full = np.zeros((4, 4))
    view = full[:2, :2]
    SGD(momentum=0.0, weight_decay=0.0).step(
        {"w": view}, {"w": np.ones((2, 2))}, lr=1.0)
    assert full[:2, :2].sum() == -4.0
    assert full[2:, :].sum() == 0.0


def test_non_finite_gradient_aborts_with_diagnostics():
    with pytest.raises(NumericsError, match="w"):
        SGD().step({"w": np.array([1.0])}, {"w": np.array([np.nan])}, lr=0.1)


def test_non_positive_learning_rate_rejected():
    with pytest.raises(ValueError):
        SGD().step({"w": np.array([1.0])}, {"w": np.array([1.0])}, lr=0.0)
