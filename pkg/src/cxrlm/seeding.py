"""Deterministic seed derivation for independent RNG streams."""

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    """Stable 63-bit seed from a master seed and a label path."""
    key = ":".join([str(int(master))] + [str(x) for x in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def make_rng(master: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *labels)))
