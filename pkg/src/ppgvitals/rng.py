"""SplitMix64 pseudo-random stream.

Used everywhere randomness must be reproducible bit-for-bit: weight
initialisation, subject splits, epoch shuffles and synthetic data.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self):
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def next_float(self):
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def next_below(self, n):
        """Integer in [0, n) by modulo reduction of one 64-bit draw."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def uniform(self, low, high):
        return low + (high - low) * self.next_float()

    def normal(self):
        """Standard normal via Box-Muller (one draw pair per call, cosine branch)."""
        u1 = self.next_float()
        u2 = self.next_float()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def u64_array(self, n):
        """The next ``n`` outputs as a uint64 array, identical to ``n`` calls of next_u64."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def floats(self, n):
        """Array of the next ``n`` uniform doubles."""
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normals(self, n):
        """Array equal to ``n`` successive :meth:`normal` calls."""
        f = self.floats(2 * n)
        return np.sqrt(-2.0 * np.log(1.0 - f[0::2])) * np.cos(2.0 * np.pi * f[1::2])


def derive_seed(seed, index):
    """Child seed for stream ``index`` of a parent seed (one SplitMix64 output)."""
    return SplitMix64((int(seed) + int(index) * GOLDEN_GAMMA) & MASK64).next_u64()


def shuffle(items, rng):
    """In-place Fisher-Yates, walking from the last slot down to 1."""
    for i in range(len(items) - 1, 0, -1):
        j = rng.next_below(i + 1)
        items[i], items[j] = items[j], items[i]
    return items
