"""Deterministic splitmix64 random stream.

splitmix64 is counter-based: output ``k`` of a stream seeded with ``s`` is
``mix(s + (k+1) * GOLDEN)`` modulo 2**64, which makes bulk generation a pure
elementwise computation.  ``uniforms``/``normals`` produce arrays that are
bit-identical to the equivalent sequence of scalar calls while advancing the
state the same number of steps.

Derived draws:
- ``uniform``: ``((next >> 11) + 1) * 2**-53`` in the half-open-from-zero
  interval ``(0, 1]``, so logarithms are always safe.
- ``normal``: Box-Muller ``sqrt(-2 ln u1) * cos(2 pi u2)``; every normal
  consumes exactly one (u1, u2) pair, nothing is cached.
- ``below(n)``: ``next() % n`` (the modulo bias is irrelevant at the tiny
  ranges used here).
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_U53 = 2.0 ** -53


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Prng:
    """splitmix64 stream; state advances by one golden-ratio step per draw."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK
        return (z ^ (z >> 31)) & _MASK

    def uniform(self) -> float:
        return ((self.next_u64() >> 11) + 1) * _U53

    def normal(self) -> float:
        u1 = self.uniform()
        u2 = self.uniform()
        return float(np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2))

    def below(self, n: int) -> int:
        if n < 1:
            raise ValueError(f"below() needs n >= 1, got {n}")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, high index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    # -- vectorized fills (bit-identical to the scalar loops) --------------

    def next_block(self, count: int) -> np.ndarray:
        """The next ``count`` raw u64 outputs as a uint64 array."""
        if count < 0:
            raise ValueError(f"next_block() needs count >= 0, got {count}")
        with np.errstate(over="ignore"):
            steps = np.arange(1, count + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
            out = _mix_array(np.uint64(self.state) + steps)
        self.state = (self.state + count * _GOLDEN) & _MASK
        return out

    def uniforms(self, count: int) -> np.ndarray:
        block = self.next_block(count)
        return ((block >> np.uint64(11)).astype(np.float64) + 1.0) * _U53

    def normals(self, count: int) -> np.ndarray:
        u = self.uniforms(2 * count)
        u1 = u[0::2]
        u2 = u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
