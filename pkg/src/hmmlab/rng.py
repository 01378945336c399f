"""Reproducible random streams.

A stream is identified by ``(seed, stream, path)``.  The triple is fed to
:class:`numpy.random.SeedSequence` as entropy plus spawn key and drives a
PCG64 bit generator, whose output is bit-stable across platforms.  Parallel
work never shares a stream: it derives children with :meth:`RngStream.child`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.stream < 0 or any(p < 0 for p in self.path):
            raise ValueError("stream indices must be non-negative")

    @property
    def spawn_key(self) -> tuple[int, ...]:
        return (int(self.stream), *map(int, self.path))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.spawn_key)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.stream, (*self.path, int(index)))


def as_generator(rng) -> np.random.Generator:
    """Accept an RngStream, a Generator, or an int seed."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        raise ValueError("an explicit random stream is required")
    return RngStream(int(rng)).generator()
