"""Derived random streams.

Every random draw in the package comes from a generator keyed by a tuple
such as ``(seed, sample_id, variant)``; results therefore do not depend on
iteration order or on how work is split across threads.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """A 64-bit integer from a stable hash of ``parts``."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def digest_arrays(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
