"""Reproducible random streams.

Every stream is a PCG64 generator seeded through ``numpy.random.SeedSequence``
with an integer key path ``(seed, *keys)``.  Both algorithms are specified by
NumPy and produce identical bits on every platform, so a key path such as
``(master_seed, setting_index, replicate)`` always yields the same draws no
matter in which order, or on which worker, the replicates are executed.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_rng", "stream_seed"]


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a PCG64 generator keyed by ``(seed, *keys)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def stream_seed(seed: int, *keys: int) -> int:
    """A 64-bit integer derived from a key path, for records that store a seed."""
    ss = np.random.SeedSequence([int(seed), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
