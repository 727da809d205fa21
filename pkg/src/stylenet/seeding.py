"""Seed derivation and thread-count plumbing.

Every CLI invocation has a single --seed; submodules get their own streams
via derive_seed(seed, purpose) so that adding a consumer never shifts the
randomness of another.
"""

import hashlib
import os

import numpy as np


def derive_seed(seed: int, *purpose) -> int:
    """Derive a 63-bit seed from a base seed and a purpose path.

    Purpose components may be strings or integers; the same components always
    yield the same derived seed.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    for part in purpose:
        h.update(b"/")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(seed: int, *purpose) -> np.random.Generator:
    """Seeded generator for one purpose, independent of all other purposes."""
    return np.random.default_rng(derive_seed(seed, *purpose))


def thread_count() -> int:
    """Worker cap from STYLENET_THREADS (0 or unset = automatic)."""
    raw = os.environ.get("STYLENET_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        return os.cpu_count() or 1
    if n <= 0:
        return os.cpu_count() or 1
    return n
