"""Labeled child seeds derived from one master seed.

``child_seed(master, "eval", 3)`` is a pure function of its arguments, so a
stream never shifts when another subsystem draws more or fewer numbers.
"""
import zlib

import numpy as np


def _key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode())


def child_seed(master: int, *labels) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(_key(l) for l in labels))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def child_rng(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, *labels))
