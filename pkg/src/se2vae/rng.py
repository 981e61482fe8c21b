"""Counter-based random streams.

Built on numpy's Philox generator. Every draw call runs on a fresh Philox
counter block derived from (seed, stream, call counter), so identical
(seed, stream, counter) triples reproduce identical draws across runs and
platforms, and a stream can be resumed exactly from its counter. Streams
are splittable: each worker/purpose gets its own stream id and results do
not depend on interleaving.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class RngStream:
    """A named, reproducible stream of random draws."""

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.counter = int(counter)

    def _next_gen(self) -> np.random.Generator:
        # Each call gets 2**64 Philox blocks of headroom; calls never overlap.
        bitgen = np.random.Philox(key=self.seed | (self.stream << 64),
                                  counter=self.counter << 64)
        self.counter += 1
        return np.random.Generator(bitgen)

    def split(self, stream: int) -> "RngStream":
        """Independent stream derived from the same seed."""
        return RngStream(self.seed, stream)

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        return np.asarray(self._next_gen().standard_normal(shape), dtype=dtype)

    def uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        return np.asarray(self._next_gen().random(shape), dtype=dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._next_gen().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_gen().permutation(n)

    def __repr__(self) -> str:
        return (f"RngStream(seed={self.seed}, stream={self.stream}, "
                f"counter={self.counter})")
