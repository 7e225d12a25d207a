"""Counter-based SplitMix64 generator.

Every fixture in the package draws from this generator so that runs are
bit-reproducible across platforms and numpy versions. The i-th output
(0-based) of a stream with seed ``s`` is::

    z = (s + (i + 1) * 0x9E3779B97F4A7C15) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

which is exactly the sequential SplitMix64 recurrence. Floats in [0, 1)
take the top 53 bits of one output. Standard normals use Box-Muller on
consecutive pairs of outputs (u1, u2) with u1 mapped into (0, 1], one
normal per pair (the cosine branch). Substreams are keyed by
``mix64(seed ^ mix64(key))``.
"""

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1


def mix64(z):
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z):
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Stateful view over the counter-based stream for one seed."""

    def __init__(self, seed):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def substream(self, key):
        return SplitMix64(mix64(self.seed ^ mix64(int(key))))

    def next_u64(self, n):
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(GAMMA)
            return _mix64_array(z)

    def uniform(self, shape):
        n = int(np.prod(shape))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape, scale=1.0):
        n = int(np.prod(shape))
        u = self.uniform((n, 2))
        u1 = 1.0 - u[:, 0]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[:, 1])
        return (scale * z).reshape(shape)

    def integers(self, low, high, shape):
        """Uniform integers in [low, high) by floor(u * (high - low))."""
        u = self.uniform(shape)
        return low + np.minimum(np.floor(u * (high - low)).astype(np.int64), high - low - 1)
