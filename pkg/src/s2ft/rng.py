"""Seeded random streams.

Every random draw in the engine goes through ``make_rng`` with an
explicit 64-bit seed; nothing reads global entropy.  PCG64 is used
because its output stream is fixed across platforms and numpy versions.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & MASK64))


def derive_seed(master: int, index: int) -> int:
    """Per-trial seed; trial ``i`` of master ``s`` gets ``s + i`` (mod 2**64)."""
    return (int(master) + int(index)) & MASK64
