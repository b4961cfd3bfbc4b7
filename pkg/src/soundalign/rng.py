"""Portable deterministic PRNG for the frozen encoder weights.

Encoder weights must be reproducible across machines and implementations,
so they are not drawn from numpy's generators (whose streams are an
implementation detail). The scheme is:

* ``splitmix64`` expands a 64-bit seed into the 256-bit xoshiro state.
* ``Xoshiro256ss`` (xoshiro256**) produces the raw 64-bit stream.
* Uniforms are ``(x >> 11) * 2**-53``; normals use the cosine branch of
  Box-Muller on two uniforms, ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
* Each weight matrix gets its own stream, keyed by a label such as
  ``"audio/projection"``: ``stream_seed = splitmix64_mix(seed ^ fnv1a64(label))``.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64_mix(z: int) -> int:
    """The splitmix64 finaliser applied to ``z + golden``."""
    z = (z + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_sequence(seed: int, count: int) -> list[int]:
    out = []
    state = seed & MASK64
    for _ in range(count):
        out.append(splitmix64_mix(state))
        state = (state + _GOLDEN) & MASK64
    return out


def fnv1a64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def stream_seed(seed: int, label: str) -> int:
    """Seed for the named sub-stream of a base seed."""
    return splitmix64_mix((seed & MASK64) ^ fnv1a64(label))


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256ss:
    """xoshiro256** seeded through splitmix64."""

    def __init__(self, seed: int):
        self.s = splitmix64_sequence(seed, 4)
        if not any(self.s):
            self.s[0] = 1

    @classmethod
    def for_stream(cls, seed: int, label: str) -> "Xoshiro256ss":
        return cls(stream_seed(seed, label))

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

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def normal(self) -> float:
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, shape: tuple[int, ...] | int) -> np.ndarray:
        """Row-major array of standard normals."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape)) if shape else 1
        return np.array([self.normal() for _ in range(count)], dtype=np.float64).reshape(shape)
