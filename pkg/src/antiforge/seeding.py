"""Named random sub-streams derived from one master seed."""

import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` (e.g. "attack", "eot", "noise-objective")."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])


def derive_seed(seed: int, name: str, *extra: int) -> int:
    return int(substream(seed, name, *extra).integers(0, 2**31 - 1))
