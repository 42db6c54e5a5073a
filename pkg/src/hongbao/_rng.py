"""Deterministic random substreams.

Every stochastic stage derives its generator from ``(seed, *keys)`` so results
do not depend on how work is sharded or scheduled.  Keys may be ints or short
strings; strings are hashed with CRC32 (stable across processes, unlike
``hash``).
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("substream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in keys))


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))


def substream_seed32(seed: int, *keys) -> int:
    """A 32-bit integer seed for code that needs a legacy-style seed (numba kernels)."""
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint32)[0])
