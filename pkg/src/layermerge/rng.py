"""Counter-based deterministic random streams (splitmix64).

Every consumer derives its own named child stream from the run seed, so
adding or reordering one consumer never shifts the draws seen by another.
Identical (seed, label) always yields the identical stream, across
platforms and process restarts.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


class Rng:
    """One splitmix64 stream: output(i) = mix(seed + (i + 1) * gamma)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def derive(self, label: str | int) -> "Rng":
        """Independent child stream, keyed by name (or index)."""
        salt = _fnv1a64(str(label).encode("utf-8"))
        return Rng(int(_mix(np.uint64((self.seed ^ salt) & _MASK))))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + idx * np.uint64(_GAMMA)
        return _mix(states)

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform [0, 1) from the top 53 bits of each word."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller over consecutive word pairs."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (n + 1) // 2
        u = (self._raw(2 * pairs) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u1 = 1.0 - u[:pairs]  # open at 0 so log is finite
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integers(self, bound: int, shape=()) -> np.ndarray:
        """Integers in [0, bound). Modulo mapping; bias is negligible for
        the small bounds used here."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        vals = (self._raw(n) % np.uint64(bound)).astype(np.int64)
        return vals.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates over [0, n)."""
        order = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = int(self._raw(1)[0] % np.uint64(i + 1))
            order[i], order[j] = order[j], order[i]
        return order
