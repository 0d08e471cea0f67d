"""Adam on flat parameter vectors, with optional global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def clip_grad_norm(grad: np.ndarray, max_norm: float | None):
    """Rescale ``grad`` to norm ``max_norm`` if it is longer. Returns (grad, original_norm)."""
    norm = float(np.linalg.norm(grad))
    if max_norm is not None and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def step(self, theta: np.ndarray, grad: np.ndarray, maximize: bool = False) -> np.ndarray:
        """Return updated parameters; ``maximize`` ascends instead of descending."""
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        step = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return theta + step if maximize else theta - step
