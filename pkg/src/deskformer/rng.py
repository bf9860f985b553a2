"""Seedable, splittable random streams.

All randomness comes from ``numpy.random.Philox`` (Philox-4x64, a
counter-based generator). A stream is identified by the run seed plus a
path of small integers or names::

    stream(seed, "init")              # parameter initialization
    stream(seed, "batch", epoch)      # data order for one epoch
    stream(seed, "mask", epoch, step) # masking noise for one step

The path is hashed through ``numpy.random.SeedSequence`` into the Philox
key, so any stream can be reconstructed from ``(seed, path)`` alone without
replaying earlier draws. Resuming training therefore only needs the step
counter.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "philox4x64-seedsequence"


def _word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("stream path components must be non-negative")
    return part


def stream(seed: int, *path) -> np.random.Generator:
    entropy = [_word(seed)] + [_word(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def spawn_seed(seed: int, *path) -> int:
    """Derive a child integer seed, for APIs that take a plain int."""
    return int(stream(seed, *path).integers(0, 2**31 - 1))
