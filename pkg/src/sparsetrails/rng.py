"""Deterministic random streams built on xoshiro256** with splitmix64 seeding.

Every random decision in this package (weight init, mask init, data
shuffling, stochastic pruning, random regrowth) is drawn from a `Stream`
derived from a single 64-bit master seed, so runs are bit-reproducible
and individual streams can be checkpointed and restored.

Substreams are derived with `Stream.child(*ids)`: the ids (small ints or
short strings) are folded into the parent seed through splitmix64, which
gives distinct, statistically independent streams for distinct id tuples.
"""

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_DOUBLE_SCALE = 1.0 / (1 << 53)


def _splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state, returning (new_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _fold(seed: int, token: int | str) -> int:
    """Mix one id token into a 64-bit seed value."""
    if isinstance(token, str):
        value = 0
        for byte in token.encode("utf-8"):
            _, value = _splitmix64((value ^ byte) & _MASK64)
    else:
        value = token & _MASK64
    _, out = _splitmix64((seed ^ value) & _MASK64)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Stream:
    """xoshiro256** generator with substream derivation and state capture."""

    __slots__ = ("_s0", "_s1", "_s2", "_s3", "_gauss_spare", "seed")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, w = _splitmix64(sm)
            words.append(w)
        self._s0, self._s1, self._s2, self._s3 = words
        if self._s0 == self._s1 == self._s2 == self._s3 == 0:
            self._s0 = _GOLDEN  # all-zero state is a fixed point
        self._gauss_spare = None

    def child(self, *ids: int | str) -> "Stream":
        """Derive an independent substream keyed by the given id tuple."""
        seed = self.seed
        for token in ids:
            seed = _fold(seed, token)
        return Stream(seed)

    # -- core generator ---------------------------------------------------

    def next_u64(self) -> int:
        result = (_rotl((self._s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (self._s1 << 17) & _MASK64
        self._s2 ^= self._s0
        self._s3 ^= self._s1
        self._s1 ^= self._s2
        self._s0 ^= self._s3
        self._s2 ^= t
        self._s3 = _rotl(self._s3, 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _DOUBLE_SCALE

    def open_unit(self) -> float:
        """Uniform double in (0, 1), safe as a log argument."""
        return ((self.next_u64() >> 11) + 0.5) * _DOUBLE_SCALE

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError(f"randbelow requires n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    # -- bulk helpers ------------------------------------------------------

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.random() for _ in range(n)], dtype=np.float64)

    def gumbels(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = -math.log(-math.log(self.open_unit()))
        return out

    def normal(self) -> float:
        """Standard normal via Box-Muller (spare value cached)."""
        if self._gauss_spare is not None:
            z = self._gauss_spare
            self._gauss_spare = None
            return z
        r = math.sqrt(-2.0 * math.log(self.open_unit()))
        theta = 2.0 * math.pi * self.random()
        self._gauss_spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)], dtype=np.float64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct integers from range(n), via partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} distinct values from range({n})")
        pool = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()

    # -- checkpointing -----------------------------------------------------

    def get_state(self) -> tuple[int, int, int, int]:
        if self._gauss_spare is not None:
            raise RuntimeError("cannot capture stream state with a cached normal pending")
        return (self._s0, self._s1, self._s2, self._s3)

    def set_state(self, state: tuple[int, int, int, int]) -> None:
        self._s0, self._s1, self._s2, self._s3 = (w & _MASK64 for w in state)
        self._gauss_spare = None
