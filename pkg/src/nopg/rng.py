"""Named random streams derived from a single integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for the path ``names`` under ``seed``.

    The same ``(seed, names)`` always yields the same stream, and distinct
    names give statistically independent streams.
    """
    key = tuple(zlib.crc32(str(n).encode()) if not isinstance(n, (int, np.integer)) else int(n)
                for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
