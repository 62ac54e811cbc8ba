"""Seeded pseudo-random streams: splitmix64 seeding feeding xoshiro256**.

Every random draw in the package comes from an :class:`Rng`. A root generator is
built from the experiment seed and hands out independent named sub-streams
(``"world"``, ``"init"``, ``"episode"``, ``"decode"``, ...), so adding draws to one
stream never perturbs another.
"""

from __future__ import annotations

import hashlib
import math
from typing import Sequence, TypeVar

import numpy as np

MASK64 = (1 << 64) - 1
T = TypeVar("T")


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step; returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class Rng:
    """xoshiro256** generator.

    ``seed`` is any non-negative integer; it is reduced mod 2**64 and expanded
    into the 256-bit state with splitmix64.
    """

    __slots__ = ("_s", "seed", "path")

    def __init__(self, seed: int, path: str = ""):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed & MASK64
        self.path = path
        x = self.seed
        state = []
        for _ in range(4):
            x, out = splitmix64(x)
            state.append(out)
        if not any(state):
            state[0] = 1
        self._s = state

    def stream(self, name: str) -> "Rng":
        """Independent child stream keyed by this stream's seed and ``name``.

        Derivation ignores how many values were already drawn from ``self``.
        """
        _, mixed = splitmix64(self.seed ^ _name_key(name))
        path = f"{self.path}/{name}" if self.path else name
        return Rng(mixed, path)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def integers(self, n: int) -> int:
        """Unbiased integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        # rejection on the top bits keeps the distribution exact
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def uniform(self, low: float, high: float, size: int | tuple[int, ...]) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        vals = np.fromiter((self.random() for _ in range(n)), dtype=np.float64, count=n)
        return (low + (high - low) * vals).reshape(shape)

    def normal(self, size: int | tuple[int, ...]) -> np.ndarray:
        """Standard normal draws by the Box-Muller transform."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        out = np.empty(n, dtype=np.float64)
        i = 0
        while i < n:
            u1 = 1.0 - self.random()  # (0, 1]
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(2.0 * math.pi * u2)
            if i + 1 < n:
                out[i + 1] = r * math.sin(2.0 * math.pi * u2)
            i += 2
        return out.reshape(shape)

    def choice(self, items: Sequence[T]) -> T:
        if not items:
            raise ValueError("cannot choose from an empty sequence")
        return items[self.integers(len(items))]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        self.shuffle(idx)
        return idx

    def sample(self, population: Sequence[T], k: int) -> list[T]:
        """``k`` distinct elements in draw order (partial Fisher-Yates)."""
        n = len(population)
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} of {n}")
        idx = list(range(n))
        for i in range(k):
            j = i + self.integers(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return [population[i] for i in idx[:k]]

    def getstate(self) -> list[int]:
        return list(self._s)
