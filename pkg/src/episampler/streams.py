"""Reproducible random streams.

Every random draw in the project flows through a Philox4x32-10
counter-based generator keyed by ``(seed, stream id)``. Philox is defined
by algorithm rather than by library, so the streams can be reproduced
exactly in any implementation, and distinct stream ids give independent,
non-overlapping streams for the same experiment seed.
"""

from __future__ import annotations

import numpy as np

DATASET = 1
INIT = 2
TRAIN_EPISODES = 3
VAL_EPISODES = 4
TEST_EPISODES = 5
ANALYSIS = 6
STATS = 7


def stream(seed: int, stream_id: int) -> np.random.Generator:
    key = np.array([int(seed) % 2**64, int(stream_id) % 2**64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
