"""Hierarchical RNG derivation.

Every random stream in a run is a named child of the root seed, so adding or
removing one consumer never reshuffles the randomness seen by another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_words(tag) -> tuple:
    if isinstance(tag, (int, np.integer)):
        return (int(tag) & 0xFFFFFFFF,)
    digest = hashlib.blake2s(str(tag).encode("utf8"), digest_size=8).digest()
    return (
        int.from_bytes(digest[:4], "little"),
        int.from_bytes(digest[4:], "little"),
    )


def seed_sequence(root_seed: int, *tags) -> np.random.SeedSequence:
    key = ()
    for tag in tags:
        key = key + _tag_words(tag)
    return np.random.SeedSequence(int(root_seed), spawn_key=key)


def child_rng(root_seed: int, *tags) -> np.random.Generator:
    """Generator for the stream named by ``tags`` under ``root_seed``."""
    return np.random.default_rng(seed_sequence(root_seed, *tags))


def child_seed(root_seed: int, *tags) -> int:
    """A 32-bit integer seed derived for the stream named by ``tags``."""
    return int(seed_sequence(root_seed, *tags).generate_state(1, np.uint32)[0])
