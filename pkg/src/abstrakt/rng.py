"""Portable seeded random numbers.

Draws come from the Philox-4x64 counter-based generator keyed by the seed.
Raw 64-bit words are turned into uniforms by keeping the top 53 bits, and
normals use the Box-Muller transform on consecutive uniform pairs, so the
normal stream depends only on the Philox word stream and not on numpy's
own normal sampler.
"""

import math

import numpy as np

__all__ = ["Rng"]

_TWO53 = float(2 ** 53)


class Rng:
    """Sequential stream of uniforms and normals.

    Parameters
    ----------
    seed : int
        Nonnegative key of the Philox generator.
    """

    def __init__(self, seed=0):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        self.seed = seed
        self._bits = np.random.Philox(key=seed)
        self._spare = None

    def uniform(self, size=None):
        """Uniform draws on ``[0, 1)`` with 53-bit resolution."""
        n = 1 if size is None else int(np.prod(size))
        raw = self._bits.random_raw(n)
        u = (raw >> np.uint64(11)).astype(np.float64) / _TWO53
        return float(u[0]) if size is None else u.reshape(size)

    def _normal_pair(self):
        u1, u2 = self.uniform(2)
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        return r * math.cos(2.0 * math.pi * u2), r * math.sin(2.0 * math.pi * u2)

    def standard_normal(self):
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        z, self._spare = self._normal_pair()
        return z

    def normal(self, mean=0.0, std=1.0, size=None):
        if size is None:
            return mean + std * self.standard_normal()
        n = int(np.prod(size))
        out = np.array([self.standard_normal() for _ in range(n)])
        return (mean + std * out).reshape(size)

    def positive_normal(self, mean, std, max_tries=10_000):
        """Normal draw, redrawn until strictly positive."""
        for _ in range(max_tries):
            v = self.normal(mean, std)
            if v > 0:
                return v
        raise ValueError(f"no positive draw from N({mean}, {std}^2) in {max_tries} tries")
