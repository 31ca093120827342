"""xoshiro256** generator seeded through splitmix64.

Constants follow the reference C implementations by Blackman and Vigna:

    splitmix64:  x += 0x9E3779B97F4A7C15
                 z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
                 z = (z ^ (z >> 27)) * 0x94D049BB133111EB
                 return z ^ (z >> 31)

    xoshiro256**: result = rotl(s1 * 5, 7) * 9
                  t = s1 << 17
                  s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
                  s2 ^= t;  s3 = rotl(s3, 45)

Floats are drawn from the top 53 bits, so any implementation that follows
the same recipe reproduces the same stream bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def derive_seed(*parts: int) -> int:
    """Mix several integers into one 64-bit seed (order sensitive)."""
    state = 0
    out = 0
    for p in parts:
        state, out = splitmix64(state ^ (int(p) & MASK64))
        state = out
    return out


class Xoshiro256:
    def __init__(self, seed: int):
        sm = int(seed) & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi) (rejection sampling, no modulo bias)."""
        span = hi - lo
        if span <= 0:
            raise ValueError("empty integer range")
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            x = self.next_u64()
            if x < limit:
                return lo + x % span

    def normal(self) -> float:
        """Standard normal via Box-Muller (one draw per call, two uniforms)."""
        u1 = self.random()
        u2 = self.random()
        # 1 - u1 lies in (0, 1], keeping log finite
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def normal_array(self, shape, dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape)) if len(shape) else 1
        vals = [self.normal() for _ in range(n)]
        return np.asarray(vals, dtype=np.float64).reshape(shape).astype(dtype)

    def uniform_array(self, shape, dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape)) if len(shape) else 1
        vals = [self.random() for _ in range(n)]
        return np.asarray(vals, dtype=np.float64).reshape(shape).astype(dtype)
