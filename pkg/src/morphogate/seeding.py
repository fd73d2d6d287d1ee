"""Deterministic seed derivation.

All randomness in the package flows from one root seed. Each stage derives a
child seed from the root plus a short stream label, so adding or reordering
stages never shifts the draws of another stage.
"""

import hashlib

import numpy as np


def child_seed(root_seed: int, label: str) -> int:
    """Derive a stable 64-bit child seed from a root seed and a stream label."""
    digest = hashlib.blake2b(f"{root_seed}:{label}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(root_seed: int, label: str) -> np.random.Generator:
    """Seeded generator for one named randomness stream."""
    return np.random.default_rng(child_seed(root_seed, label))
