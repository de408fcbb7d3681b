"""Named derivation of random streams from one global seed.

``derive(seed, "negatives", epoch)`` always yields the same generator, so a
component can be rerun on its own without replaying everything before it.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def derive(seed, *names):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in names)))
