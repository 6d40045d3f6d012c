"""Deterministic random streams.

Every source of randomness in the package is a `numpy` Generator derived from
a (seed, purpose, epoch, index) key. Streams are independent: drawing from one
never affects another, so results are reproducible regardless of evaluation
order or worker count.
"""
from __future__ import annotations

import zlib

import numpy as np

_U64 = (1 << 64) - 1


def stream(seed: int, purpose: str, epoch: int = 0, index: int = 0) -> np.random.Generator:
    """Return the generator keyed by (seed, purpose, epoch, index).

    The purpose string is folded to 32 bits with CRC32; epoch and index must be
    non-negative. The same key always yields the same sequence.
    """
    if epoch < 0 or index < 0:
        raise ValueError(f"epoch and index must be non-negative, got ({epoch}, {index})")
    key = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed) & _U64, spawn_key=(key, int(epoch), int(index)))
    return np.random.Generator(np.random.PCG64(ss))
