"""Small shared helpers: seeded RNG streams and stable file hashing."""

from __future__ import annotations

import hashlib

import numpy as np


def rng_for(seed: int, *tags: int | str) -> np.random.Generator:
    """Independent PCG64 generator for a (seed, purpose...) stream.

    Every consumer of randomness in the package derives its generator
    through this helper so that streams never alias: the same seed with
    different tags gives statistically independent sequences, and the
    whole tuple is reproducible across processes and platforms.

    Args:
        seed: experiment-level seed.
        tags: stream identifiers, ints or short strings (hashed).
    """
    parts = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            digest = hashlib.sha256(tag.encode("utf-8")).digest()
            parts.append(int.from_bytes(digest[:4], "big"))
        else:
            parts.append(int(tag) & 0xFFFFFFFF)
    return np.random.default_rng(parts)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
