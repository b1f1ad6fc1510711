"""
Seed derivation

All randomness in the pipeline flows from one top level seed. A component
asks for its own seed with derive_seed(seed, "component", index, ...), which
hashes the tags so sibling components never share a stream.
"""
import hashlib
import numpy as np


def derive_seed(seed: int, *tags) -> int:
    """Returns a 63 bit seed for (seed, tags...)"""
    material = ":".join([str(int(seed))] + [str(tag) for tag in tags])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng_for(seed: int, *tags) -> np.random.Generator:
    """A numpy Generator seeded by derive_seed"""
    return np.random.default_rng(derive_seed(seed, *tags))
