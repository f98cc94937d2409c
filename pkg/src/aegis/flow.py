"""Flow-matching objective for the action expert."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, ops


def sample_beta_a1(rng: np.random.Generator, a: float, n: int) -> np.ndarray:
    """Beta(a, 1) by inverse CDF: F(t) = t**a, so t = u**(1/a)."""
    return rng.random(n) ** (1.0 / a)


@dataclass
class FlowNoise:
    t: np.ndarray      # (B,)
    eps: np.ndarray    # (B, H, A)

    @classmethod
    def draw(cls, rng: np.random.Generator, shape, beta_a: float = 1.5) -> "FlowNoise":
        B = shape[0]
        return cls(sample_beta_a1(rng, beta_a, B), rng.standard_normal(shape))


def noise_rng(seed: int, step: int, micro: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step), int(micro), 31337])


def interpolate(actions: np.ndarray, noise: FlowNoise):
    """Return (a_t, target velocity) for the linear path a_t = t a1 + (1 - t) eps."""
    t = noise.t[:, None, None]
    a_t = t * actions + (1.0 - t) * noise.eps
    return a_t, actions - noise.eps


def fm_mse(expert, h_last: Tensor, mask: np.ndarray, actions: np.ndarray, noise: FlowNoise) -> Tensor:
    """Raw (unscaled) per-element MSE between predicted and target velocity."""
    a_t, target = interpolate(actions, noise)
    v = expert(a_t, noise.t, h_last, mask)
    err = v - target
    return ops.mean(err * err)
