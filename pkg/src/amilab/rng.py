"""Counter-based SplitMix64 random stream.

Output number ``i`` of a stream seeded with ``s`` is ``mix(s + (i + 1) * GAMMA)``
where ``mix`` is the SplitMix64 finalizer. Everything is 64-bit integer
arithmetic, so the stream is identical on every platform and numpy version.
The full state is the pair ``(seed, counter)``.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_U = np.uint64


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U(30))) * _U(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U(27))) * _U(0x94D049BB133111EB)
    return z ^ (z >> _U(31))


def mix64(value: int) -> int:
    """SplitMix64 finalizer on a single Python int."""
    return int(_mix(np.array([value & _MASK], dtype=np.uint64))[0])


class Rng:
    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        return _mix(idx * _U(GAMMA) + _U(self.seed))

    def random(self, n: int) -> np.ndarray:
        """``n`` floats in [0, 1) built from the top 53 bits."""
        return (self.next_u64(n) >> _U(11)).astype(np.float64) * (2.0 ** -53)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        return (low + (high - low) * self.random(n)).reshape(shape)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """``n`` ints in [low, high]; modulo reduction (bias below 2**-50 for small ranges)."""
        span = high - low + 1
        if span <= 0:
            raise ValueError("empty integer range")
        return (self.next_u64(n) % _U(span)).astype(np.int64) + low

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        out = np.arange(n, dtype=np.int64)
        if n < 2:
            return out
        draws = self.next_u64(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] % _U(i + 1))
            out[i], out[j] = out[j], out[i]
        return out

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; does not advance this one."""
        return Rng(mix64(self.seed ^ mix64(key + 1)))

    def state(self) -> dict:
        return {"algorithm": "splitmix64-counter", "seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        if state.get("algorithm") != "splitmix64-counter":
            raise ValueError(f"unknown rng algorithm {state.get('algorithm')!r}")
        return cls(state["seed"], state["counter"])

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"
