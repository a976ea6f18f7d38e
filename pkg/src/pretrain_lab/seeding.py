"""Deterministic seed derivation.

Every stochastic component owns an RNG stream derived from the master seed
plus a textual purpose label, so independent stages never share a stream
and reruns reproduce byte-identical artifacts.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(master: int, *labels: object) -> int:
    """Derive a 64-bit child seed from a master seed and purpose labels.

    Stable across platforms and Python versions (sha256-based, not hash()).
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for lab in labels:
        h.update(b"\x1f")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:8], "little") & _MASK64


def make_rng(seed: int, *labels: object) -> np.random.Generator:
    """PCG64 generator for the stream named by (seed, labels)."""
    if labels:
        seed = derive_seed(seed, *labels)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def record_rng(master_seed: int, record_index: int) -> np.random.Generator:
    """Per-record stream: generation parallelizes without changing output."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([master_seed & _MASK64, record_index]))
    )
