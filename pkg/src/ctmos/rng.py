"""Named random streams derived from a single 64-bit seed.

Every consumer asks for its own stream by name, so adding a consumer never
shifts the draws seen by another one.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))
