"""splitmix64 streams and FNV-1a hashing.

Both are tiny, fully specified integer algorithms, so outputs are identical
on every platform. The vectorised generator below produces the same sequence
as stepping :class:`SplitMix64` one value at a time.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

_INV_2_53 = 1.0 / (1 << 53)


def fnv1a64(data: bytes | str) -> int:
    """64-bit FNV-1a of ``data`` (strings are hashed as UTF-8)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def tensor_seed(global_seed: int, name: str) -> int:
    """Per-tensor stream seed: ``global_seed XOR fnv1a(name)``."""
    return (int(global_seed) & MASK64) ^ fnv1a64(name)


class SplitMix64:
    """Scalar splitmix64 generator (Steele, Lea & Flood)."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _INV_2_53


def splitmix64_block(seed: int, n: int, start: int = 0) -> np.ndarray:
    """Outputs ``start .. start+n-1`` of the stream seeded with ``seed``."""
    idx = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    z = np.uint64(int(seed) & MASK64) + idx * np.uint64(GOLDEN_GAMMA)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


def uniform_block(seed: int, n: int, start: int = 0) -> np.ndarray:
    """Uniform doubles in [0, 1); same values as repeated ``next_float``."""
    bits = splitmix64_block(seed, n, start) >> np.uint64(11)
    return bits.astype(np.float64) * _INV_2_53


def normal_block(seed: int, n: int) -> np.ndarray:
    """Standard normal variates via Box-Muller on consecutive uniform pairs.

    Pair ``(u0, u1)`` yields ``r*cos(2*pi*u1)`` then ``r*sin(2*pi*u1)`` with
    ``r = sqrt(-2 ln(1 - u0))``; an odd trailing variate is dropped.
    """
    pairs = (n + 1) // 2
    u = uniform_block(seed, 2 * pairs)
    radius = np.sqrt(-2.0 * np.log1p(-u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:n]
