"""Keyed random streams.

Every consumer of randomness asks for a stream by purpose and indices, e.g.
``stream(seed, "train", client, round)``. The key is hashed with BLAKE2b
into a 128-bit seed for a PCG64 generator, so streams are independent of
call order and reproducible in isolation.
"""

import hashlib

import numpy as np


def derive_seed(master_seed: int, purpose: str, *indices) -> int:
    key = "/".join([str(int(master_seed)), purpose, *(str(i) for i in indices)])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(master_seed: int, purpose: str, *indices) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, purpose, *indices))
