"""Deterministic RNG streams.

Every stochastic component derives its generator from a counter-based
Philox keyed by a hash of (seed, *labels), so parallel and serial runs of
the same pipeline produce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(*parts) -> int:
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def derive_rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))
