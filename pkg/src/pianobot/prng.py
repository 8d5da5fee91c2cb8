"""Deterministic, splittable random number generation.

Everything stochastic in the package draws from a counter-based Philox
generator keyed by (seed, stream).  Streams are derived from string labels
so independent consumers (parameter init, noise draws, data shuffling)
never share a sequence, and every run is reproducible from a single seed.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_id(label: str) -> int:
    """Stable 32-bit stream id for a label."""
    return zlib.crc32(label.encode("utf-8"))


def make_rng(seed: int, stream: int | str = 0) -> np.random.Generator:
    """Philox generator for an independent (seed, stream) pair."""
    if isinstance(stream, str):
        stream = stream_id(stream)
    return np.random.Generator(np.random.Philox(key=(seed & 0xFFFFFFFFFFFFFFFF, stream)))
