"""Deterministic random streams keyed by (seed, name, index, ...).

Every consumer derives its own generator from a tuple of keys, so results do
not depend on the order in which work is scheduled.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed: int, *keys: int | str) -> int:
    """Collapse ``seed`` and ``keys`` into a single unsigned 64-bit seed."""
    ss = np.random.SeedSequence(entropy=_key_to_int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for the given key path."""
    ss = np.random.SeedSequence(entropy=_key_to_int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))
