"""Seed handling.

Every replication draws from its own substream derived from one root seed:
``SeedSequence(root, spawn_key=(index,))``. The derivation only depends on
numpy's documented SeedSequence hashing, so a given (root, index) pair maps to
the same stream across releases of this package. Compiled kernels take a
32-bit seed drawn from the same substream.
"""

from __future__ import annotations

import numpy as np


def substream(root: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(root), spawn_key=(int(index),))


def substream_generator(root: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(substream(root, index)))


def kernel_seed(seed: int) -> int:
    """32-bit seed for compiled kernels, derived from a 64-bit user seed."""
    return int(np.random.SeedSequence(int(seed) & (2**64 - 1)).generate_state(1, np.uint32)[0])


def replication_seeds(root: int, count: int) -> list[int]:
    """Independent 63-bit seeds for ``count`` replications under ``root``."""
    return [int(substream(root, i).generate_state(1, np.uint64)[0] >> np.uint64(1))
            for i in range(count)]
