"""Splittable, platform-stable seed derivation.

Sub-seeds are derived as ``seed XOR sha256(parts)`` so that work items
(books, tiles, epochs) can be processed in any order or on any number of
workers and still produce identical output. Python's built-in hash() is
deliberately avoided: it is randomized per process.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stable_hash64(*parts) -> int:
    """Hash strings/ints/bytes to a 64-bit value, stable across runs."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, bytes):
            h.update(b"b:" + p)
        elif isinstance(p, str):
            h.update(b"s:" + p.encode("utf-8"))
        elif isinstance(p, (int, np.integer)):
            h.update(b"i:" + str(int(p)).encode("ascii"))
        else:
            raise TypeError(f"unhashable seed part of type {type(p).__name__}")
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def derive_seed(seed: int, *parts) -> int:
    """Derive a per-work-item seed: seed ^ hash(parts)."""
    return (int(seed) ^ stable_hash64(*parts)) & _MASK64


def make_rng(seed: int, *parts) -> np.random.Generator:
    """Deterministic generator for the given seed and derivation path."""
    return np.random.default_rng(derive_seed(seed, *parts) if parts else int(seed))
