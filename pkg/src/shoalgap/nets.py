"""Minimal dense-network plumbing shared by the conv agent and the policy.

Float64 throughout with hand-written backward passes, so gradients can be
validated against finite differences and runs replay bit-identically.
"""

from __future__ import annotations

import numpy as np

from .core import RngStream

LEAKY_SLOPE = 0.01


def leaky_relu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def leaky_relu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, LEAKY_SLOPE)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def init_dense(rng: RngStream, fan_in: int, fan_out: int, scale: float = 1.0) -> np.ndarray:
    """Weight block ~ N(0, scale^2 / fan_in), flattened row-major."""
    std = scale / np.sqrt(fan_in)
    return rng.normal(0.0, std, size=fan_in * fan_out)


class RMSProp:
    """Momentum-free adaptive step: w -= lr * g / (sqrt(mean g^2) + eps)."""

    def __init__(self, n_params: int, lr: float, rho: float = 0.99, eps: float = 1e-8):
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.cache = np.zeros(n_params)

    def step(self, weights: np.ndarray, grad: np.ndarray) -> None:
        self.cache *= self.rho
        self.cache += (1.0 - self.rho) * grad * grad
        weights -= self.lr * grad / (np.sqrt(self.cache) + self.eps)
