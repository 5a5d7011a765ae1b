"""Seeded, platform-stable random streams.

Every source of randomness in the package flows through :class:`Rng`.
Streams are derived, never mutated-and-shared: ``rng.child(tag, ...)``
yields an independent generator keyed only by the root seed and the tag
path, so any point of a training run can be reproduced from
``(seed, epoch, batch)`` without replaying history.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_int(tag):
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    return int(tag) & 0xFFFFFFFFFFFFFFFF


class Rng:
    """Deterministic PCG64 stream addressed by (seed, tag path)."""

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self._path = tuple(_path)
        entropy = (self.seed & 0xFFFFFFFFFFFFFFFF,) + self._path
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *tags):
        """Independent stream for a sub-task; same tags, same stream."""
        return Rng(self.seed, self._path + tuple(_key_int(t) for t in tags))

    # thin passthroughs; float draws come back as float32/float64 numpy arrays
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, mean=0.0, std=1.0, size=None):
        return self._gen.normal(mean, std, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def beta(self, a, b):
        return float(self._gen.beta(a, b))

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def random(self, size=None):
        return self._gen.random(size)
