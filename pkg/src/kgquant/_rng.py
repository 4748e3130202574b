"""Seed derivation.

Every random draw in the package comes from a generator keyed by
``(master seed, *context)``, so draws for one entity (or one epoch, one
batch) never depend on how many other draws happened before it.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def derive_rng(seed: int, *context) -> np.random.Generator:
    """Return a generator that depends only on ``seed`` and ``context``.

    Context items may be non-negative ints or string purpose tags.
    """
    entropy = [_key(seed)] + [_key(c) for c in context]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
