"""
Deterministic Random Numbers
----------------------------
Seeded random streams used by every stochastic component (initialisation,
data synthesis, augmentation, dropout, batch order).

The generator is numpy's counter-based Philox4x64 bit generator, seeded
through SeedSequence. Its output for a given seed is documented to be
identical on every platform numpy supports, and no OS entropy is read.
"""

import numpy as np

ALGORITHM = "philox4x64"


class Rng:
    """
    A seeded random stream.

    Attributes:
        seed (int): 64-bit seed the stream was created from.
        algorithm (str): Name of the underlying bit generator.
    """

    def __init__(self, seed):
        seed = int(seed)
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError(f"Seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self.algorithm = ALGORITHM
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))

    def child(self, key):
        """
        Derive an independent stream for a named purpose.

        Args:
            key (int or str): Stream key; strings are hashed deterministically.

        Returns:
            Rng: New stream whose draws do not depend on this stream's state.
        """
        return Rng(derive_seed(self.seed, key))

    def normal(self, size, std=1.0, dtype=np.float32):
        return (self._gen.standard_normal(size) * std).astype(dtype)

    def uniform(self, low, high, size, dtype=np.float32):
        return self._gen.uniform(low, high, size).astype(dtype)

    def integers(self, low, high, size=None):
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def bernoulli(self, p, size):
        return self._gen.random(size) < p

    def permutation(self, n):
        return self._gen.permutation(n)


def derive_seed(seed, key):
    """
    Combine a seed and a key into a new 64-bit seed.

    Args:
        seed (int): Parent seed.
        key (int or str): Stream key.

    Returns:
        int: Derived seed.
    """
    if isinstance(key, str):
        key = [ord(c) for c in key]
    elif not isinstance(key, (list, tuple)):
        key = [int(key)]
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *key])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
