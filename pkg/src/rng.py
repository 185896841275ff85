"""Seeding helpers for reproducible, scheduling-independent random streams.

Every unit of work (a tree, a fold, an ensemble member, a permuted column)
draws from its own counter-based Philox stream keyed by the run seed and the
unit's index. The same seed therefore yields the same numbers whether the
units run sequentially or spread over any number of workers.
"""

import numpy as np

__all__ = ["ALGORITHM", "substream", "derive_seed"]

# Recorded in model bundles so a saved model names the generator that built it.
ALGORITHM = "numpy Philox4x64-10, key from SeedSequence(seed, *keys)"

_MASK64 = (1 << 64) - 1


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Return the generator for the unit identified by ``keys`` under ``seed``."""
    entropy = [int(seed) & _MASK64] + [int(k) & _MASK64 for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from ``rng`` to key a family of substreams."""
    return int(rng.integers(0, 2**63 - 1))
