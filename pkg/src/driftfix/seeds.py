"""Deterministic RNG derivation.

Every stochastic component gets its own generator derived from a master seed
and a string tag, so that e.g. changing the refinement method never perturbs
the stream contents. The derivation rule is fixed: each tag is hashed to a
64-bit integer (SHA-256, little-endian low 8 bytes) and the sequence
``[seed, tag_0, tag_1, ...]`` feeds a ``numpy.random.SeedSequence``.
"""
from __future__ import annotations

import hashlib

import numpy as np


def tag_to_int(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(seed: int, *tags: str | int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed)] + [tag_to_int(t) for t in tags])


def spawn_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Independent generator for (seed, tags); same inputs, same stream."""
    return np.random.default_rng(seed_sequence(seed, *tags))


def derive_seed(seed: int, *tags: str | int) -> int:
    """Collapse (seed, tags) to a plain integer seed for nested configs."""
    return int(seed_sequence(seed, *tags).generate_state(1, np.uint64)[0])
