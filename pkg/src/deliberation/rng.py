"""Named, reproducible random streams derived from one global seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def stream(seed, *names):
    """Generator for the sub-stream ``hash(seed, *names)``.

    Independent of Python's randomized ``hash`` and of call order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed, *names):
    return int(stream(seed, *names).integers(0, 2**63 - 1))
