"""Counter-based deterministic pseudo-randomness.

Hash-of-(seed, labels) streams instead of stateful generators: results
never depend on call order, so parallel evaluation and resumed runs
produce identical artifacts.
"""

from __future__ import annotations

import hashlib

import numpy as np


def det_hash64(*parts) -> int:
    """64-bit blake2b of the stringified parts."""
    data = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "big")


def det_uniform(*parts) -> float:
    """Uniform in [0, 1), a pure function of the parts."""
    return det_hash64(*parts) / 2.0**64


def philox(*parts) -> np.random.Generator:
    """Counter-based numpy generator keyed by the parts."""
    return np.random.Generator(np.random.Philox(key=det_hash64(*parts)))


def unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)
