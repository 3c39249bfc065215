"""
Deterministic seed derivation.

Every random stream in the pipeline is derived from one run seed and a tuple
of component names / indices, so streams never depend on call order.
"""

import hashlib
from typing import Union

import numpy as np

SeedPart = Union[str, int]


def derive_seed(seed: int, *parts: SeedPart) -> int:
    """Hash (seed, parts...) into a 63-bit sub-seed."""
    key = ":".join([str(int(seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_rng(seed: int, *parts: SeedPart) -> np.random.Generator:
    """Independent generator for the stream named by ``parts``."""
    return np.random.default_rng(derive_seed(seed, *parts))
