"""Deterministic random-stream derivation.

Every stochastic component draws from its own generator, derived from a
single master seed plus a purpose label (and optional integer indices such
as the training iteration).  The derivation is a stable hash, so runs are
reproducible across processes and platforms and streams for different
purposes are statistically independent.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(master_seed: int, label: str, *indices: int) -> np.random.SeedSequence:
    """Child seed for ``(master_seed, label, *indices)``.

    The label is hashed with SHA-256 so the mapping does not depend on
    Python's randomized ``hash()``.
    """
    tag = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")
    return np.random.SeedSequence(entropy=[int(master_seed) & (2**64 - 1), tag, *indices])


def stream(master_seed: int, label: str, *indices: int) -> np.random.Generator:
    """Independent generator for ``(master_seed, label, *indices)``."""
    return np.random.default_rng(stream_seed(master_seed, label, *indices))
