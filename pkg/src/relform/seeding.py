"""Named random sub-streams derived from one 64-bit master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *names) -> int:
    key = ":".join([str(int(seed))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def derive_rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
