"""Seed handling.

Every random draw in the package comes from a counter-based Philox stream
derived from one integer seed plus a tuple of stream labels, so sub-tasks
stay reproducible no matter in which order they run.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Generator for ``seed`` and the named sub-stream ``stream``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label(k) for k in stream))
    return np.random.Generator(np.random.Philox(ss))
