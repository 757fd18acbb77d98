"""Seeded random source shared by transforms, samplers and trainers.

Draws come from numpy's PCG64 bit generator, whose output stream is fixed for a
given seed on every platform. Child sources are derived from the parent seed
and a component name through SHA-256, so adding a component never shifts the
draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class RandomSource:
    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, counter={self.counter})"

    def child(self, name: str) -> "RandomSource":
        return RandomSource(derive_seed(self.seed, name))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, lo: float, hi: float) -> float:
        self.counter += 1
        return float(self._gen.uniform(lo, hi))

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        self.counter += 1
        return int(self._gen.integers(lo, hi, endpoint=True))

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        self.counter += 1
        return self._gen.choice(n, size=size, replace=replace)

    def normal(self, size=None, scale: float = 1.0):
        self.counter += 1
        return self._gen.normal(0.0, scale, size)

    def torch_seed(self) -> int:
        """A seed for torch generators, drawn from this stream."""
        self.counter += 1
        return int(self._gen.integers(0, 2**63 - 1))
