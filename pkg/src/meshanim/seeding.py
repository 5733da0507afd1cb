"""Counter-based random streams derived from a single run seed.

Every consumer asks for a generator keyed by ``(seed, stream, counter)``;
streams are named, and the Philox generator is keyed through
``SeedSequence`` so different keys give independent draws regardless of
the order in which they are requested.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    if value < 0:
        raise ValueError("seed components must be non-negative")
    return value


def seed_sequence(seed, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([_key(seed)] + [_key(k) for k in keys])


def rng(seed, *keys) -> np.random.Generator:
    """Generator for stream ``keys`` of run ``seed``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))


def derive_seed(seed, *keys) -> int:
    """A 32-bit integer seed for APIs that only take integers."""
    return int(seed_sequence(seed, *keys).generate_state(1)[0])
