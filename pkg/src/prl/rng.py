"""Seedable random stream shared by every stochastic choice in a run."""

from __future__ import annotations

import math

import numpy as np


class Rng:
    """Deterministic PRNG (PCG64 underneath).

    Uniform draws come straight from the bit generator; Gaussian draws are
    produced with Box-Muller so the transform is fixed and platform independent.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())

    def normal(self, size: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        n_pairs = (size + 1) // 2
        u1 = 1.0 - self._gen.random(n_pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(n_pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        z = np.empty(2 * n_pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return mean + std * z[:size]

    def glorot(self, shape: tuple[int, ...]) -> np.ndarray:
        if len(shape) == 1:
            fan_in, fan_out = 1, shape[0]
        else:
            fan_in, fan_out = shape[-2], shape[-1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return self._gen.uniform(-limit, limit, shape)
