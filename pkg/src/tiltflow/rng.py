"""Deterministic random stream policy.

Every stochastic component draws from a counter-based Philox generator keyed
by (global seed, role tag, chain index). Streams for distinct (role, chain)
pairs are statistically independent and, crucially, positionally independent:
consuming more values from one stream never shifts any other stream.
"""
from __future__ import annotations

import zlib

import numpy as np


def role_tag(role: str) -> int:
    """Stable 32-bit tag for a role name (CRC-32 of the UTF-8 bytes)."""
    return zlib.crc32(role.encode("utf-8"))


def stream(seed: int, role: str, chain: int = 0) -> np.random.Generator:
    """Generator for the (seed, role, chain) stream."""
    if seed < 0:
        raise ValueError(f"seed must be >= 0, got {seed}")
    if not 0 <= chain < 2**32:
        raise ValueError(f"chain index out of range: {chain}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(role_tag(role), int(chain)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, role: str, chain: int = 0) -> int:
    """Collapse a (seed, role, chain) stream into a fresh 63-bit integer seed."""
    words = stream(seed, role, chain).bit_generator.random_raw(1)
    return int(words[0]) >> 1


def resolve(seed_or_rng: int | np.random.Generator, role: str, chain: int = 0) -> np.random.Generator:
    """Accept either a raw seed (derives the role stream) or a ready generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return stream(int(seed_or_rng), role, chain)
