"""In-place parameter updates: plain SGD and Adam."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import ContractError, Tensor


class Optimizer:
    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {i} {p.shape} has no gradient")
            grads.append(p.grad)
        return grads

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def step(self) -> None:
        for p, g in zip(self.params, self._grads()):
            p.data -= self.lr * g


class Adam(Optimizer):
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def reset_state(self, param: Tensor, rows) -> None:
        """Zero both moments for ``rows`` of ``param`` (used after latent resampling)."""
        for p, m, v in zip(self.params, self.m, self.v):
            if p is param:
                m[rows] = 0.0
                v[rows] = 0.0
                return
        raise KeyError("parameter not managed by this optimizer")


def sgd_adam_step(opt: Optimizer) -> None:
    opt.step()
