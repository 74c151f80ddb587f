import numpy as np
import pytest

from decision_nce.autodiff import Tensor, backward
from decision_nce.config import OptimizerConfig
from decision_nce.errors import ConfigError
from decision_nce.optim import SGD, Adam, build_optimizer, grad_norm


def _quadratic_step(optimizer, theta):
    """One step on f(θ) = ½‖θ‖², whose gradient is θ."""
    optimizer.zero_grad()
    backward((theta * theta).sum() * 0.5)
    optimizer.step()


class TestAdam:
    def test_first_step_matches_hand_calculation(self):
        start = np.array([0.5, -2.0, 3.0])
        theta = Tensor.param(start.copy())
        _quadratic_step(Adam([("theta", theta)], lr=0.01), theta)
        g = start
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = start - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(theta.data, expected, rtol=0, atol=1e-12)

    def test_first_step_moves_each_coordinate_by_lr(self):
        theta = Tensor.param([4.0, -7.0])
        _quadratic_step(Adam([("theta", theta)], lr=0.1), theta)
        np.testing.assert_allclose(theta.data, [3.9, -6.9], atol=1e-8)

    def test_zero_learning_rate_is_exact(self):
        start = np.array([1.25, -0.5])
        theta = Tensor.param(start.copy())
        optimizer = Adam([("theta", theta)], lr=0.0, weight_decay=0.1)
        for _ in range(5):
            _quadratic_step(optimizer, theta)
        np.testing.assert_array_equal(theta.data, start)

    def test_approaches_minimum(self):
        theta = Tensor.param([1.0, -1.0])
        optimizer = Adam([("theta", theta)], lr=0.05)
        for _ in range(500):
            _quadratic_step(optimizer, theta)
        assert np.max(np.abs(theta.data)) < 0.25


class TestSGD:
    def test_coupled_weight_decay(self):
        theta = Tensor.param([2.0])
        _quadratic_step(SGD([("theta", theta)], lr=0.1, weight_decay=0.5), theta)
        assert theta.data[0] == pytest.approx(2.0 - 0.1 * (2.0 + 0.5 * 2.0))


class TestBuild:
    def test_selects_rule(self):
        params = [("theta", Tensor.param([1.0]))]
        assert isinstance(build_optimizer(OptimizerConfig(), params, 0.1), Adam)
        assert isinstance(build_optimizer(OptimizerConfig(name="sgd"), params, 0.1), SGD)

    def test_unknown_rule(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(name="lion")

    def test_grad_norm(self):
        a, b = Tensor.param([3.0]), Tensor.param([4.0])
        backward(a.sum() * 3.0 + b.sum() * 4.0)
        assert grad_norm([("a", a), ("b", b)]) == pytest.approx(5.0)
