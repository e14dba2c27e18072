"""Deterministic RNG derivation: every random draw comes from a (seed, purpose) stream."""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    digest = hashlib.sha256(str(tag).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def seed_seq(root: int, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root)] + [_tag_int(t) for t in tags])


def rng_for(root: int, *tags) -> np.random.Generator:
    """Generator keyed by (root seed, purpose tags); independent of call order."""
    return np.random.default_rng(seed_seq(root, *tags))
