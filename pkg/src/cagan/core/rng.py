"""Counter-based random streams.

Each stream is a Philox generator keyed by ``(seed, stream id)``, so any
stream can be recreated from its labels alone; training resumes by rebuilding
the stream for the next step instead of persisting generator state.
Normal variates use the Box-Muller transform on the uniform stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(*labels) -> int:
    """Stable 64-bit id for a tuple of labels (strings or ints)."""
    text = "/".join(str(x) for x in labels).encode("utf-8")
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


class Rng:
    def __init__(self, seed: int, *labels):
        self.seed = int(seed) & _MASK64
        self.stream = stream_id(*labels) if labels else 0
        self._gen = np.random.Generator(np.random.Philox(key=self.seed | (self.stream << 64)))

    def child(self, *labels) -> "Rng":
        """Independent stream derived from this one's seed and the given labels."""
        return Rng(self.seed, self.stream, *labels)

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1], keeps log finite
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self._gen.random(n), kind="stable")
