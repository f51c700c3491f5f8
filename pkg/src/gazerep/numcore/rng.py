"""Seeded random streams.

Every consumer derives its own generator from ``(seed, *stream ids)`` so
results do not depend on call interleaving between components.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def name_id(name: str) -> int:
    """Stable 32-bit id for a string (used to key per-parameter streams)."""
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: tuple[int, ...] = ()

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(int(i) & _MASK64 for i in ids))

    def generator(self) -> np.random.Generator:
        entropy = [int(self.seed) & _MASK64, *self.stream]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def rng_stream(seed: int, *ids: int) -> np.random.Generator:
    return RngStream(seed).child(*ids).generator()
