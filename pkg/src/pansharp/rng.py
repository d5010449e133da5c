"""Seeded xorshift64* generator.

Every random choice in the toolkit (weight init, patch offsets, splits,
epoch order) goes through this class so runs are reproducible from the
seed alone, in any language that implements the same arithmetic:

* the seed is expanded with one splitmix64 step
  (``z += 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
  z = (z ^ z>>27) * 0x94D049BB133111EB; z ^= z>>31``), a zero state is
  replaced by ``0x9E3779B97F4A7C15``;
* each draw does ``x ^= x>>12; x ^= x<<25; x ^= x>>27`` and returns
  ``x * 0x2545F4914F6CDD1D`` (all mod 2**64);
* ``uniform()`` uses the top 53 bits, ``randbelow(n)`` is ``(draw * n) >> 64``.
"""

from __future__ import annotations

from typing import MutableSequence

import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MULT = 0x2545F4914F6CDD1D


def _splitmix64(z: int) -> int:
    z = (z + GOLDEN) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


class XorShift64Star:
    def __init__(self, seed: int):
        state = _splitmix64(int(seed) & MASK)
        self.state = state or GOLDEN

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK
        x ^= x >> 27
        self.state = x
        return (x * MULT) & MASK

    def uniform(self) -> float:
        """Float in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape))
        vals = np.fromiter((self.uniform() for _ in range(size)), dtype=np.float64, count=size)
        return (low + (high - low) * vals).reshape(shape)

    def shuffle(self, items: MutableSequence) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order
