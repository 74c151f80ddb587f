"""First-order optimizers over named leaf tensors.

Weight decay is coupled: it is added to the gradient as an L2 term before the
update rule sees it.
"""

import logging
from collections.abc import Sequence

import numpy as np

from decision_nce.autodiff import Tensor
from decision_nce.config import OptimizerConfig

logger = logging.getLogger(__name__)


class Optimizer:
    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = np.zeros_like(p.data)

    def _gradient(self, p: Tensor) -> np.ndarray:
        if self.weight_decay:
            return p.grad + self.weight_decay * p.data
        return p.grad

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def step(self) -> None:
        for _, p in self.params:
            p.data -= self.lr * self._gradient(p)


class Adam(Optimizer):
    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            g = self._gradient(p)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def build_optimizer(
    config: OptimizerConfig,
    params: Sequence[tuple[str, Tensor]],
    lr: float,
    weight_decay: float = 0.0,
) -> Optimizer:
    if config.name == "sgd":
        return SGD(params, lr, weight_decay)
    return Adam(params, lr, weight_decay, config.beta1, config.beta2, config.eps)


def grad_norm(params: Sequence[tuple[str, Tensor]]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in params)))
