"""Named random streams derived from one global seed.

Each stage (initialization, sampling, dropout, ...) gets its own generator so
that changing how much randomness one stage consumes never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    key = [int(seed), zlib.crc32(name.encode("utf-8")), *(int(i) for i in index)]
    return np.random.default_rng(np.random.SeedSequence(key))
