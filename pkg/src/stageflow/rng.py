"""Seeded random streams with deterministic child-stream derivation."""

from __future__ import annotations

import zlib

import numpy as np


def _label_entropy(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


class SeededRng:
    """PCG64 stream owned by one consumer.

    Identical seed plus identical call sequence reproduces the same values.
    Independent consumers must use `child(...)` streams instead of sharing
    one instance, so call order in unrelated code cannot perturb results.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self._spawn_key = _spawn_key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_spawn_key))
        )
        self.position = 0

    def child(self, *labels) -> "SeededRng":
        """Derive an independent stream named by `labels` (strings or ints)."""
        key = self._spawn_key + tuple(_label_entropy(l) for l in labels)
        return SeededRng(self.seed, _spawn_key=key)

    def normal(self, shape, scale=1.0) -> np.ndarray:
        self.position += 1
        return self._gen.normal(0.0, scale, size=shape).astype(np.float32)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        self.position += 1
        return self._gen.uniform(low, high, size=shape).astype(np.float32)

    def random(self, shape) -> np.ndarray:
        self.position += 1
        return self._gen.random(size=shape, dtype=np.float64)

    def integers(self, low, high, shape=None) -> np.ndarray:
        self.position += 1
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        self.position += 1
        return self._gen.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, key={self._spawn_key}, position={self.position})"
