"""Deterministic RNG substreams.

All randomness in a run flows from one integer seed; independent components
(device layout, network init, batch sampling, ...) get decorrelated
generators via fixed stream tags so adding a consumer never shifts another.
"""

import numpy as np

# stream tags (stable; append only)
STREAM_DEVICE_LAYOUT = 1
STREAM_NET_INIT = 2
STREAM_BATCH = 3
STREAM_ENV_RESET = 4
STREAM_ENV_STEP = 5
STREAM_EPSILON = 6
STREAM_REPLAY = 7
STREAM_EVAL = 8
STREAM_SUBSAMPLE = 9
STREAM_RELABEL = 10


def substream(seed: int, *tags: int) -> np.random.Generator:
    """Generator for the given seed and stream tag path."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(t) for t in tags]]))
