"""Deterministic derivation of independent random streams.

Every stochastic component draws from a generator derived from the master
seed plus a structured key, e.g. ``spawn_stream(seed, "trial", fold, rnd, i)``,
so any slice of the pipeline can be replayed in isolation and concurrent
workers never share a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (bool, float)):
        raise TypeError(f"stream key parts must be ints or strings, got {part!r}")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key ints must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        # stable across processes, unlike hash()
        return int.from_bytes(hashlib.sha256(part.encode("utf-8")).digest()[:8], "little")
    raise TypeError(f"stream key parts must be ints or strings, got {part!r}")


def spawn_stream(master_seed: int, *key) -> np.random.Generator:
    """Return a PCG64 generator for (master_seed, key), independent per key."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key_part(p) for p in key))
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(master_seed: int, *key) -> int:
    """Collapse (master_seed, key) into a plain integer seed for sub-configs."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key_part(p) for p in key))
    return int(seq.generate_state(1, dtype=np.uint64)[0])
