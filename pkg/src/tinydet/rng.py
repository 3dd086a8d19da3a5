"""Deterministic, seedable random number generation.

All randomness in the package funnels through :class:`Rng`, a counter-based
generator built on the SplitMix64 mixing function (Steele, Lea & Flood;
the same function the xoshiro family uses for seeding).  Being counter
based makes the stream random-access and trivially vectorizable: sample i
of a stream with seed s is ``mix64(s + (i+1)*GAMMA)``.

Fixed constants (hex):
    GAMMA = 0x9E3779B97F4A7C15
    M1    = 0xBF58476D1CE4E5B9
    M2    = 0x94D049BB133111EB

Uniform doubles use the top 53 bits: ``(z >> 11) * 2**-53``.
Normals use the Box-Muller transform on consecutive uniform pairs.
"""

from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# FNV-1a 64-bit, used only to derive child stream seeds from string tags.
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def mix64(x):
    """SplitMix64 finalizer (arithmetic mod 2^64). Scalar or ndarray."""
    with np.errstate(over="ignore"):
        z = x + GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _fnv1a(tag: str) -> np.uint64:
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for b in tag.encode("utf-8"):
            h = (h ^ np.uint64(b)) * _FNV_PRIME
    return h


class Rng:
    """Counter-based SplitMix64 stream.

    The stream position advances by the number of raw 64-bit words drawn,
    so interleaving scalar and block draws stays reproducible.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._pos = 0

    def split(self, tag: str) -> "Rng":
        """Independent child stream derived from a string tag."""
        return Rng(int(mix64(self._seed ^ _fnv1a(tag))))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._pos + 1, self._pos + n + 1, dtype=np.uint64)
        self._pos += n
        with np.errstate(over="ignore"):
            return mix64(self._seed + idx * GAMMA)

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * u

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # u1 in (0, 1] so log is finite; u2 in [0, 1)
        u1 = ((raw[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return mean + std * z

    def trunc_normal(self, n: int, std: float, bound: float = 2.0) -> np.ndarray:
        """Truncated normal on [-bound*std, bound*std] via inverse-CDF sampling."""
        from scipy.special import erf, erfinv

        lo, hi = erf(-bound / np.sqrt(2.0)), erf(bound / np.sqrt(2.0))
        u = self.uniform(n, lo, hi)
        return std * np.sqrt(2.0) * erfinv(u)

    def integers(self, n: int, lo: int, hi: int) -> np.ndarray:
        """Uniform integers in [lo, hi] inclusive, via rejection-free modulo on 53 bits."""
        span = hi - lo + 1
        if span <= 0:
            raise ValueError("empty integer range")
        u = self._raw(n) >> np.uint64(11)
        return (lo + (u % np.uint64(span)).astype(np.int64)).astype(np.int64)

    def shuffle(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (Fisher-Yates)."""
        perm = np.arange(n)
        if n > 1:
            js = self.integers(n - 1, 0, n - 1)  # j for positions n-1 .. 1
            for k, i in enumerate(range(n - 1, 0, -1)):
                j = int(js[k]) % (i + 1)
                perm[i], perm[j] = perm[j], perm[i]
        return perm
