"""Named random streams.

All randomness goes through PCG64 generators seeded by
``SeedSequence(seed, spawn_key=(stream, *path))``. Different streams drawn
from the same seed are statistically independent, and a stream never depends
on how many numbers another stream consumed.
"""
from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    MDP = 0
    DATASET = 1
    SPLIT = 2
    INIT = 3
    BATCH = 4
    DIRECTIONS = 5
    GNET = 6
    POLICY = 7


def make_rng(seed: int, stream: int = 0, *path: int) -> np.random.Generator:
    """Generator for ``stream``; ``path`` selects independent substreams within it."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(stream), *(int(p) for p in path)))
    return np.random.Generator(np.random.PCG64(sequence))
