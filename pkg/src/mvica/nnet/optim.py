"""Adaptive-moment (Adam) first-order optimizer."""
from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


class Adam:
    def __init__(self, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta, grad):
        """Update ``theta`` in place and return it."""
        if grad.shape != self.m.shape or theta.shape != self.m.shape:
            raise ValueError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}, state {self.m.shape}")
        bad = ~np.isfinite(grad)
        if bad.any():
            raise NonFiniteError(f"non-finite gradient at parameter index {int(np.flatnonzero(bad)[0])}")
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        bad = ~np.isfinite(theta)
        if bad.any():
            raise NonFiniteError(f"parameter {int(np.flatnonzero(bad)[0])} became non-finite at step {self.t}")
        return theta


def step(state: Adam, theta, grad):
    return state.step(theta, grad)
