"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *path) -> np.random.Generator:
    """Independent generator for ``(seed, *path)``; e.g. ``substream(7, "init", "fold", 3)``.

    String parts are hashed with CRC32 so the mapping is stable across processes.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path)))
