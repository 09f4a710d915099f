"""Counter-style random streams keyed by integer tuples."""
from __future__ import annotations

import numpy as np


def keyed_rng(*keys: int) -> np.random.Generator:
    """Philox generator whose stream depends only on ``keys``.

    Streams for different key tuples are independent, so work keyed by
    ``(seed, stream, step)`` can run in any order without changing results.
    """
    if any(int(k) < 0 for k in keys):
        raise ValueError(f"rng keys must be non-negative, got {keys}")
    seq = np.random.SeedSequence([int(k) for k in keys])
    return np.random.Generator(np.random.Philox(seq))
