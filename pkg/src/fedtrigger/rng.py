"""Named, seeded random streams.

Every consumer of randomness gets its own stream derived from the master seed
and a stream name (plus optional integer keys such as a device id), so adding
draws in one subsystem never shifts the draws of another.
"""
import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(master_seed: int, name: str, *keys: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(stream_key(name), *map(int, keys)))
    return np.random.default_rng(seq)
