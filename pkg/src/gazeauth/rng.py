"""Seed derivation helpers.

Every random draw in the package flows through an explicitly seeded
``numpy.random.Generator``; nothing touches numpy's global RNG state.
Sub-seeds are derived by hashing a tuple of labels so that independent
pipeline stages (cohort generation, model init, shuffling, dropout, ...)
get decorrelated, reproducible streams from one master seed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Derive a stable 63-bit seed from an arbitrary tuple of labels.

    Parts are rendered with repr(), so ints, strings, and enums are all
    fine; the result depends only on the values, not on interpreter state.
    """
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_rng(*parts) -> np.random.Generator:
    """Build a PCG64 generator seeded from derive_seed(*parts)."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
