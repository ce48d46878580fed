"""Seeded random-stream derivation.

Every stochastic step derives its generator from (seed, purpose, epoch, ...)
instead of consuming a single sequential stream, so resuming a run at epoch e
replays exactly the streams an uninterrupted run would have used.
"""

from __future__ import annotations

import numpy as np

# Stream ids. Values are arbitrary but frozen: changing them changes every
# seeded artifact.
INIT = 1
BATCH = 2
VIEWS = 3
KMEANS = 4
DATA = 5
SPLIT = 6
TEST = 7
MEANS = 8


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Generator for stream `key` of experiment `seed`."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))
