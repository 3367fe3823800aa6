"""Counter-based random streams.

Every ``Rng`` is a (seed, stream) pair backed by a Philox generator keyed on
both values, so the k-th draw of a stream is a pure function of
(seed, stream, k). Child streams are derived by hashing, never by consuming
draws from the parent.
"""
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _label_code(label):
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK64
    code = 0xCBF29CE484222325
    for byte in str(label).encode("utf-8"):
        code = ((code ^ byte) * 0x100000001B3) & _MASK64
    return code


@dataclass(frozen=True)
class Rng:
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= int(self.seed) <= _MASK64 and 0 <= int(self.stream) <= _MASK64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")

    def generator(self):
        """Fresh numpy Generator positioned at draw 0 of this stream."""
        key = (int(self.stream) << 64) | int(self.seed)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels):
        """Independent stream addressed by ``labels`` (ints or strings)."""
        stream = int(self.stream)
        for label in labels:
            stream = _splitmix64(stream ^ _splitmix64(_label_code(label)))
        return Rng(self.seed, stream)

    def normal(self, shape):
        return self.generator().standard_normal(shape)

    def uniform(self, shape):
        return self.generator().random(shape)

    def integers(self, high, size):
        return self.generator().integers(0, high, size=size)

    def permutation(self, n):
        return self.generator().permutation(n)

    def keep_mask(self, shape, rate):
        """Bernoulli(1 - rate) keep mask as float64."""
        return (self.generator().random(shape) >= rate).astype(np.float64)


def as_rng(rng):
    if isinstance(rng, Rng):
        return rng
    if rng is None:
        return Rng(0)
    return Rng(int(rng))
