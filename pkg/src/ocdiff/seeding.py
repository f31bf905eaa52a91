"""Named random substreams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, name: str, *keys: int) -> int:
    """64-bit seed for substream ``name`` (plus integer keys) of ``seed``.

    Substreams are independent of each other, so adding a new consumer or
    sweep dimension never shifts the numbers another consumer sees.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()), *(int(k) for k in keys)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name, *keys))
