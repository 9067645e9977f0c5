"""Deterministic random streams based on splitmix64.

splitmix64 is counter-based: the k-th output of a stream seeded with ``s`` is
``mix64(s + (k+1) * GAMMA)`` (mod 2**64).  That makes the scalar and the
vectorized bulk path provably bit-identical, and the whole stream reproducible
on any platform from the 64-bit seed alone.

Derived draws are documented here because other modules rely on them being
stable:

* ``next_u64``      -> raw 64-bit output
* ``uniform``       -> ``(u >> 11) * 2**-53`` scaled into ``[lo, hi)``
* ``randint(n)``    -> ``next_u64() % n`` (modulo reduction, n << 2**64)
* ``shuffle``       -> Fisher-Yates driven by ``randint``
* ``spawn``         -> child stream seeded with one ``next_u64`` draw
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """The splitmix64 finalizer on a single 64-bit value."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps mod 2**64, matching the scalar path bit for bit
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """A splitmix64 stream identified by (seed, draw counter)."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & MASK64
        self.counter = int(counter)

    def next_u64(self) -> int:
        self.counter += 1
        return mix64((self.seed + self.counter * GAMMA) & MASK64)

    def next_array(self, n: int) -> np.ndarray:
        """The next ``n`` raw draws as a uint64 array (advances the stream)."""
        ks = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64_array(np.uint64(self.seed) + ks * np.uint64(GAMMA))

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + u * (hi - lo)

    def uniform_array(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = (self.next_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + u * (hi - lo)

    def randint(self, n: int) -> int:
        """Uniform int in [0, n). Modulo reduction; bias is negligible for n << 2**64."""
        if n <= 0:
            raise ValueError(f"randint upper bound must be positive, got {n}")
        return self.next_u64() % n

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def spawn(self) -> "SeededRng":
        """Child stream whose seed is one draw from this stream."""
        return SeededRng(self.next_u64())


def phase_seed(global_seed: int, phase: int) -> int:
    """Stable per-phase seed derivation for pipeline stages."""
    return mix64((global_seed + phase * GAMMA) & MASK64)
