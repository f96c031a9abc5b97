"""First-order optimizers and target networks"""
from __future__ import annotations

import numpy as np


class Sgd:
    """plain gradient descent, theta <- theta - lr * grad"""

    def __init__(self, params: dict, lr: float = 1e-2):
        self.params = params
        self.lr = lr

    def step(self, grads: dict):
        for name, grad in grads.items():
            self.params[name] -= self.lr * grad


class Adam:
    """adaptive moment estimation

    Parameters
    ----------
    params : dict of numpy.ndarray
        updated in place.
    lr : float
    betas : tuple of float
    eps : float
    """

    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, grad in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad**2
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            self.params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def make_optimizer(name: str, params: dict, lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return Sgd(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


class TargetNetwork:
    """shadow copy theta' of a network, tracked by Polyak averaging

    After :meth:`update`, theta' = (1 - tau) theta' + tau theta elementwise.
    """

    def __init__(self, net, tau: float = 1e-3):
        if not 0.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        self.net = net.copy()
        self.tau = tau

    def update(self, net):
        for name, value in net.params.items():
            shadow = self.net.params[name]
            shadow *= 1.0 - self.tau
            shadow += self.tau * value

    def __call__(self, obs):
        return self.net(obs)
