"""Named random substreams derived from one master seed.

``substream(seed, "truth")`` and ``substream(seed, "shots", 3)`` are
independent generators; each name is hashed with CRC-32 and appended to the
master seed as the spawn key of a :class:`numpy.random.SeedSequence`.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("truth", "init", "protocol", "states", "bases", "shots", "batches", "directions", "phi")


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in names))
    return np.random.default_rng(ss)
