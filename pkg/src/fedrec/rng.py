"""Keyed random streams.

Every stochastic operation in the simulator draws from a generator keyed by
(seed, label, ...) rather than from one shared stream. Two consequences:
identical keys always reproduce identical draws, and concurrent workers
cannot perturb each other's results no matter how they are scheduled.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _as_entropy(part) -> int:
    if isinstance(part, (int, np.integer)):
        value = int(part)
        if value >= 0:
            return value
        part = f"neg:{value}"
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def substream(seed: int, *parts) -> np.random.Generator:
    """Independent generator for the key (seed, *parts).

    Parts may be ints or strings; strings are hashed to stable integers.
    """
    entropy = [_as_entropy(seed)] + [_as_entropy(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))
