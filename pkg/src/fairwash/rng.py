"""Deterministic random streams.

All randomness in the library flows through RngState so that every run is
reproducible from a single 64-bit seed. Streams are addressed by a string
tag; the (seed, tag) pair keys a Philox4x64 counter-based generator, so
streams are independent of each other and of the order in which they are
created. Identical seed and tag give the identical stream on every platform
supported by numpy's BitGenerator stability policy.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


class RngState:
    """Named deterministic random streams on a counter-based generator."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64

    def stream(self, tag: str) -> np.random.Generator:
        """A fresh generator for (seed, tag), always starting at counter zero.

        Calling twice with the same tag returns generators that produce the
        same values, which is intentional: a stream is a pure function of the
        seed and the tag, not of call order.
        """
        key = (self.seed, zlib.crc32(tag.encode("utf-8")) & _MASK64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, tag: str) -> "RngState":
        """Derive an independent RngState, e.g. one per worker or per run."""
        mixed = (self.seed * 6364136223846793005 + zlib.crc32(tag.encode("utf-8")) + 1) & _MASK64
        return RngState(mixed)

    def __repr__(self):
        return f"RngState(seed={self.seed})"
