"""Seeded, splittable random streams.

All randomness goes through :func:`make_rng` and :func:`substream`, which
wrap numpy's counter-based Philox bit generator.  A substream is a pure
function of ``(seed, *path)``, so a routine can regenerate the randomness of
any step without replaying everything before it.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def make_rng(seed=None) -> np.random.Generator:
    """Generator from an int seed, or pass an existing Generator through."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is not None and (not isinstance(seed, (int, np.integer)) or seed < 0):
        raise ValidationError(f"seed must be a non-negative integer, got {seed!r}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent stream addressed by ``seed`` and an integer path."""
    # spawn_key rather than extra entropy words: SeedSequence ignores trailing zero words
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=tuple(map(int, path)))))


def derive_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from ``rng``."""
    return int(rng.integers(0, 2**63 - 1))


def randbelow(rng: np.random.Generator, n: int) -> int:
    """Uniform integer in ``[0, n)`` for arbitrarily large Python ints."""
    if n <= 0:
        raise ValidationError("randbelow needs a positive bound")
    if n <= 2**62:
        return int(rng.integers(0, n))
    bits = n.bit_length()
    nbytes = (bits + 7) // 8
    while True:
        r = int.from_bytes(rng.bytes(nbytes), "little") >> (8 * nbytes - bits)
        if r < n:
            return r
