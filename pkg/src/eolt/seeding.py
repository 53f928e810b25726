"""Named deterministic RNG streams.

Every source of randomness in the package derives from one experiment seed
through named child streams (e.g. ``rng_from(seed, "attack", image_id)``),
so results are reproducible regardless of execution order or worker count.
"""

from __future__ import annotations

import zlib

import numpy as np


def _token(x) -> int:
    if isinstance(x, (int, np.integer)):
        return int(x) & 0xFFFFFFFF
    return zlib.crc32(str(x).encode("utf-8"))


def rng_from(seed: int, *names) -> np.random.Generator:
    """Generator for the child stream identified by ``names`` under ``seed``.

    crc32 tokens keep the derivation stable across platforms and runs.
    """
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_token(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(keys))


def child_seed(seed: int, *names) -> int:
    """Stable integer seed for the named child stream (for sub-derivation)."""
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_token(n) for n in names]
    return int(np.random.SeedSequence(keys).generate_state(1, np.uint64)[0])
