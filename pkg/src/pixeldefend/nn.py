"""Parameter containers, initialisation and the Adam optimiser."""

from __future__ import annotations

from typing import Dict

import numpy as np

from .autograd import Tensor

Params = Dict[str, np.ndarray]


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(gain / max(fan_in, 1))


def as_leaves(params: Params) -> Dict[str, Tensor]:
    return {k: Tensor(v, name=k, check=False) for k, v in params.items()}


class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start:start + size]
