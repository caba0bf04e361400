"""Deterministic random-number streams keyed by hierarchical labels.

Every stochastic component (dataset generation, training, SBC sampling,
test-set generation) draws from a stream derived from a string/int key via
SHA-256, so results are reproducible across processes and platforms and
independent of scheduling or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stable_seed", "substream"]


def _digest(parts: tuple) -> bytes:
    canonical = "\x1f".join(repr(p) for p in parts)
    return hashlib.sha256(canonical.encode("utf-8")).digest()


def stable_seed(*parts) -> int:
    """128-bit integer seed derived deterministically from the key parts."""
    return int.from_bytes(_digest(parts)[:16], "little")


def substream(*parts) -> np.random.Generator:
    """Independent generator for the given key.

    Keys are namespaced by convention, e.g. ``substream("sim", "train",
    benchmark, seed, index)`` for the per-sample simulation stream, so that
    different uses of the same user-facing seed never collide.
    """
    return np.random.default_rng(np.random.SeedSequence(stable_seed(*parts)))
