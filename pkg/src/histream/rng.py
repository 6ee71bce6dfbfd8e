"""Counter-based random numbers with keyed, non-overlapping substreams.

Philox (numpy's counter-based bit generator) supplies the raw uint64 stream.
An ``Rng`` is identified by a 128-bit Philox key ``(seed, stream)``; substreams
derive a fresh ``stream`` word by hashing a label path with SplitMix64, so
streams obtained under distinct paths never overlap regardless of how many
values each one consumes. This makes every noise draw a pure function of
(seed, key path, shape) and independent of evaluation order.

The raw uint64 stream is exact across platforms (pure integer algorithm).
Gaussians use the trigonometric Box-Muller transform on that stream; cos/sin
go through libm, so gaussian output is bit-stable within a platform and
reproducible to the last ulp across typical libm implementations.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Philox

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _fold(h: int, value) -> int:
    """Fold one path component (int or str) into a running 64-bit hash."""
    if isinstance(value, bool):  # bool is an int subclass; keep it distinct
        value = 2 if value else 3
    if isinstance(value, int):
        return _splitmix64(h ^ (value & _MASK64))
    if isinstance(value, str):
        data = value.encode("utf-8")
        h = _splitmix64(h ^ len(data))
        for i in range(0, len(data), 8):
            h = _splitmix64(h ^ int.from_bytes(data[i : i + 8], "little"))
        return h
    raise TypeError(f"substream path components must be int or str, got {type(value)!r}")


class Rng:
    """Splittable deterministic random source.

    ``Rng(seed)`` is the root stream; ``rng.substream(*path)`` returns an
    independent stream for that label path. Draws advance the stream's
    internal counter.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bitgen = Philox(key=key)

    def substream(self, *path) -> "Rng":
        h = self.stream
        for part in path:
            h = _fold(h, part)
        return Rng(self.seed, stream=h)

    def derive_seed(self, *path) -> int:
        """A stable 64-bit integer for seeding nested generators."""
        return self.substream(*path).stream ^ self.seed

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 words; advances the stream."""
        return self._bitgen.random_raw(n)

    def uniform(self, n: int | None = None):
        """Uniform float64 in [0, 1); scalar when n is None."""
        words = self.raw(1 if n is None else n)
        u = (words >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return float(u[0]) if n is None else u

    def standard_normal(self, shape, dtype=np.float32) -> np.ndarray:
        """i.i.d. N(0, 1) via trigonometric Box-Muller on the uniform stream."""
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        words = self.raw(2 * pairs)
        # u1 in (0, 1] so log() is finite; u2 in [0, 1)
        u1 = ((words[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0**-53)
        u2 = (words[pairs:] >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape).astype(dtype)
