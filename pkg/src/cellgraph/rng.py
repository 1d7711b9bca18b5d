"""SplitMix64 streams.

Every random decision in the pipeline is drawn from a stream derived from one
integer seed plus a name (and optionally an index), so results never depend on
call order or on how work is scheduled across processes.
"""

import zlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z):
    """SplitMix64 finalizer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed, name, index=0):
    """64-bit seed for the substream ``(seed, name, index)``."""
    h = mix64((seed & MASK64) ^ GOLDEN)
    h = mix64(h ^ zlib.crc32(name.encode("utf-8")))
    return mix64(h + (index & MASK64) * GOLDEN)


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK64

    def next_u64(self):
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def random(self):
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n):
        """Uniform integer in [0, n), unbiased (rejection sampling)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = MASK64 - (MASK64 + 1) % n
        while True:
            r = self.next_u64()
            if r <= limit:
                return r % n

    def sample(self, population, k):
        """``k`` distinct items of ``population`` (partial Fisher-Yates)."""
        pool = list(population)
        if k > len(pool):
            raise ValueError("sample larger than population")
        for i in range(k):
            j = i + self.randbelow(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def numpy_rng(seed, name, index=0):
    """numpy Generator on the named substream."""
    return np.random.default_rng(derive_seed(seed, name, index))
