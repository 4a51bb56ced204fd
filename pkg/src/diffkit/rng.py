"""Seeded random streams.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's Philox counter-based bit generator. Normal variates are drawn
with the Box-Muller transform on top of the raw uniforms so the stream of
values depends only on the seed, not on numpy's sampling algorithms.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Counter-based random stream keyed by a tuple of integers."""

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        # fixed-width words plus a length prefix: SeedSequence would otherwise
        # treat (7,) and (7, 0) as the same entropy
        entropy = [len(self.keys)]
        for v in (self.seed, *self.keys):
            v &= 0xFFFFFFFFFFFFFFFF
            entropy += [v & 0xFFFFFFFF, v >> 32]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *keys: int) -> "Rng":
        """Independent stream derived from this one's seed and extra keys."""
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, shape, dtype=np.float64) -> np.ndarray:
        """Uniform samples on [0, 1)."""
        return self._gen.random(shape, dtype=np.float64).astype(dtype, copy=False)

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape, dtype=np.int64))
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1], keeps log finite
        u2 = self._gen.random(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * half)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:n].reshape(shape).astype(dtype, copy=False)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Uniform integers on [low, high)."""
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float, size) -> np.ndarray:
        return self.uniform(size) < p
