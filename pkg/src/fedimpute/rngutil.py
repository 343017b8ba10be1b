"""Deterministic RNG stream derivation.

Every source of randomness in the package is a numpy Generator derived from
a master seed plus a tuple of context keys (round, client id, epoch, ...),
so that any sub-computation can be replayed in isolation and results do not
depend on execution order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(key: int | str) -> tuple[int, ...]:
    if isinstance(key, (int, np.integer)):
        return (int(key) & 0xFFFFFFFF, (int(key) >> 32) & 0xFFFFFFFF)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def derive_seed_seq(*keys: int | str) -> np.random.SeedSequence:
    """Build a SeedSequence from a mixed tuple of ints and strings."""
    entropy: list[int] = []
    for key in keys:
        entropy.extend(_key_words(key))
    return np.random.SeedSequence(entropy)


def derive_rng(*keys: int | str) -> np.random.Generator:
    """Derive an independent Generator from context keys."""
    return np.random.default_rng(derive_seed_seq(*keys))
