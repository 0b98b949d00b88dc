"""Keyed random streams.

Every random choice in a simulation is drawn from a generator identified
by a master seed plus a tuple of integer keys (sweep index, trial, stage).
Streams with different keys are statistically independent, and a stream
depends only on its key, never on which worker happens to run it.
"""

from __future__ import annotations

import numpy as np

# Stage keys used by the protocol pipelines.
RANDOMIZE = 0
SHUFFLE = 1
FORGE = 2
HASH = 3


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream ``(seed, *key)``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))
