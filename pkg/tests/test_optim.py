import numpy as np
import pytest

from psfcn.errors import ShapeError, ValidationError
from psfcn.optim import AdamState, adam_step
from psfcn.tensor import Tensor


def adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar textbook Adam in float64."""
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
    return theta


def test_adam_matches_textbook_reference():
    rng = np.random.default_rng(0)
    theta0 = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
    grads = [rng.standard_normal(theta0.shape).astype(np.float32) for _ in range(5)]
    params = {"w": Tensor(theta0, requires_grad=True)}
    state = AdamState(learning_rate=1e-2)
    for g in grads:
        params = adam_step(params, {"w": g}, state)
    assert state.step == 5
    np.testing.assert_allclose(params["w"].data, adam_reference(theta0, grads, 1e-2), rtol=1e-5, atol=1e-6)
    assert params["w"].requires_grad


def test_first_adam_step_moves_by_learning_rate():
    # with bias correction the first step is lr * sign(g)
    params = {"w": Tensor(np.zeros((1, 1, 1, 3)))}
    out = adam_step(params, {"w": np.array([2.0, -0.5, 1e-3], np.float32).reshape(1, 1, 1, 3)}, AdamState(1e-3))
    np.testing.assert_allclose(out["w"].data.ravel(), [-1e-3, 1e-3, -1e-3], rtol=1e-4)


def test_zero_learning_rate_leaves_parameters_unchanged():
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = adam_step({"w": w}, {"w": np.full((1, 1, 2, 2), 3.0, np.float32)}, AdamState(learning_rate=0.0))
    assert np.array_equal(out["w"].data, w.data)


def test_missing_gradient_counts_as_zero():
    w = Tensor(np.ones((1, 1, 1, 1)))
    out = adam_step({"w": w}, {}, AdamState())
    assert np.array_equal(out["w"].data, w.data)


def test_adam_minimises_a_quadratic():
    target = np.array([3.0, -2.0, 0.5], np.float32).reshape(1, 1, 1, 3)
    params = {"x": Tensor(np.zeros((1, 1, 1, 3)))}
    state = AdamState(learning_rate=0.05)
    for _ in range(2000):
        params = adam_step(params, {"x": 2 * (params["x"].data - target)}, state)
    np.testing.assert_allclose(params["x"].data, target, atol=1e-2)


def test_adam_validation():
    with pytest.raises(ValidationError):
        AdamState(beta1=1.0)
    with pytest.raises(ValidationError):
        AdamState(epsilon=0.0)
    with pytest.raises(ShapeError):
        adam_step({"w": Tensor(np.ones((1, 1, 1, 2)))}, {"w": np.ones((1, 1, 1, 3), np.float32)}, AdamState())
