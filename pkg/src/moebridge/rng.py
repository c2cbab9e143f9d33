"""Seeded pseudo-random streams with a bit-exact, portable algorithm.

State setup uses SplitMix64: starting from the seed, each call advances the
state by 0x9E3779B97F4A7C15 and returns

    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z ^ (z >> 31)

all modulo 2**64. Four SplitMix64 outputs seed a xoshiro256** generator,
whose next() is

    result = rotl(s1 * 5, 7) * 9
    t = s1 << 17
    s2 ^= s0;  s3 ^= s1;  s1 ^= s2;  s0 ^= s3;  s2 ^= t
    s3 = rotl(s3, 45)

with rotl(x, k) = ((x << k) | (x >> (64 - k))) mod 2**64. Uniform doubles
take the top 53 bits: (next() >> 11) * 2**-53. Normals come from the
Box-Muller transform on consecutive uniform pairs. Any implementation of
these recurrences reproduces the streams bit for bit.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_DOUBLE_UNIT = 2.0 ** -53


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new_state, output)."""
    state = (state + _GAMMA) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def mix_key(seed: int, *tags: int | str) -> int:
    """Derive an independent stream key from a seed and tag values."""
    state = seed & _MASK
    for tag in tags:
        if isinstance(tag, str):
            for byte in tag.encode("utf-8"):
                state, out = splitmix64(state ^ byte)
                state ^= out
        else:
            state, out = splitmix64(state ^ (int(tag) & _MASK))
            state ^= out
    state, out = splitmix64(state)
    return out


class Rng:
    """xoshiro256** stream seeded via SplitMix64 expansion of one 64-bit key."""

    __slots__ = ("s0", "s1", "s2", "s3", "_spare_normal")

    def __init__(self, seed: int):
        state = seed & _MASK
        state, self.s0 = splitmix64(state)
        state, self.s1 = splitmix64(state)
        state, self.s2 = splitmix64(state)
        state, self.s3 = splitmix64(state)
        self._spare_normal = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        x = (s1 * 5) & _MASK
        result = (((x << 7) | (x >> 57)) & _MASK) * 9 & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * _DOUBLE_UNIT

    def open_unit(self) -> float:
        """Uniform strictly inside (0, 1)."""
        return ((self.next_u64() >> 11) + 0.5) * _DOUBLE_UNIT

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection on the top bits."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = (_MASK + 1) - ((_MASK + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def _bulk_u53(self, n: int, offset: float) -> np.ndarray:
        """n top-53-bit draws with the state loop inlined for speed; output
        bits identical to repeated next_u64 calls."""
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            x = (s1 * 5) & _MASK
            r = (((x << 7) | (x >> 57)) & _MASK) * 9 & _MASK
            t = (s1 << 17) & _MASK
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
            out[i] = ((r >> 11) + offset) * _DOUBLE_UNIT
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return out

    def uniforms(self, n: int) -> np.ndarray:
        return self._bulk_u53(n, 0.0)

    def normal(self) -> float:
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        u1 = self.open_unit()
        u2 = self.uniform()
        r = np.sqrt(-2.0 * np.log(u1))
        self._spare_normal = float(r * np.sin(2.0 * np.pi * u2))
        return float(r * np.cos(2.0 * np.pi * u2))

    def normals(self, shape) -> np.ndarray:
        """Standard normal array via Box-Muller on uniform pairs.

        Pair layout: the radius draw is open-interval (offset 0.5), the
        angle draw plain; the state loop is inlined for bulk speed but the
        consumed stream matches repeated next_u64 calls exactly."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = np.empty(2 * pairs, dtype=np.float64)
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        for i in range(2 * pairs):
            x = (s1 * 5) & _MASK
            r = (((x << 7) | (x >> 57)) & _MASK) * 9 & _MASK
            t = (s1 << 17) & _MASK
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
            u[i] = ((r >> 11) + (0.5 if i % 2 == 0 else 0.0)) * _DOUBLE_UNIT
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        radius = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        return z[:n].reshape(shape)
