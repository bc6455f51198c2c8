"""Stable hashing and seed derivation.

Everything random in the package is keyed off these helpers so results do not
depend on iteration order, worker count or the Python hash seed.
"""
from __future__ import annotations

import hashlib

MASK64 = (1 << 64) - 1


def hash64(key: str) -> int:
    """First 8 bytes (big-endian) of the BLAKE2b digest of ``key``."""
    return int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "big")


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix(base_seed: int, *keys: int | str) -> int:
    """Fold integer or string keys into ``base_seed``; result is a 64-bit seed."""
    h = splitmix64(base_seed & MASK64)
    for key in keys:
        if isinstance(key, str):
            key = hash64(key)
        h = splitmix64(h ^ (key & MASK64))
    return h


def unit_interval(key: str, salt: str = "") -> float:
    """Map a string to [0, 1) deterministically."""
    return hash64(salt + key) / float(1 << 64)
