"""Deterministic 64-bit RNG for reproducible load schedules.

Workload schedules must be bit-identical across runs, machines, and
re-implementations in other languages, so we fix the generator algorithm
instead of relying on a standard library's unspecified internals.

Normative algorithm
-------------------
* State seeding: four rounds of splitmix64 over the user seed produce the
  xoshiro256** state (s0..s3). If all four words come out zero, s3 is set
  to 1.
* next_u64: xoshiro256** (Blackman/Vigna): ``rotl(s1 * 5, 7) * 9`` output,
  then the standard state transition with the 17-bit shift and 45-bit roll.
* next_double: ``(next_u64() >> 11) * 2**-53`` in [0, 1).
* exponential(rate): inverse CDF ``-ln(1 - u) / rate``; a draw of u == 0.0
  (probability 2**-53) is redrawn so gaps are strictly positive.
* uniform index over n: ``next_u64() % n`` (the modulo bias at n << 2**64
  is accepted and part of the fixed algorithm).

Any independent re-implementation of the rules above reproduces the exact
output stream for a given seed.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class DeterministicRng:
    """xoshiro256** seeded via splitmix64, with the derived draws fixed above."""

    def __init__(self, seed: int):
        sm = seed & _MASK64
        state = []
        for _ in range(4):
            sm, out = _splitmix64(sm)
            state.append(out)
        if not any(state):
            state[3] = 1
        self._s = state

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def next_double(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def exponential(self, rate: float) -> float:
        # Literal -log(1-u)/rate, not log1p: re-implementations must match
        # this expression bit for bit.
        u = self.next_double()
        while u == 0.0:
            u = self.next_double()
        return -math.log(1.0 - u) / rate

    def next_index(self, n: int) -> int:
        if n <= 0:
            raise ValueError("next_index requires n >= 1")
        return self.next_u64() % n
