"""Named random substreams.

All randomness in a run flows from one integer seed; each consumer asks for
a substream by name (and optional integer qualifiers such as epoch/step), so
reruns and resumed runs consume identical random numbers.
"""
from __future__ import annotations

import zlib

import numpy as np


def sub_rng(seed: int, *names) -> np.random.Generator:
    """Generator for the substream identified by (seed, *names).

    String names are hashed with crc32; integers pass through. The same
    tuple always yields the same stream, independent of call order.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, str):
            words.append(zlib.crc32(name.encode("utf-8")))
        else:
            words.append(int(name) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))
