"""Deterministic random streams keyed by integer tuples.

Every random draw in the project flows through a Philox generator keyed by an
explicit (seed, context, ...) tuple, so a draw is reproducible from its key
alone: no generator state is threaded between components, and interleaving
human/UI activity with simulation cannot shift anyone else's stream.
"""

from __future__ import annotations

import numpy as np

# Stream salts. One per consumer so keys never collide across components.
ENV_RESET = 101
ENV_STEP = 102
DEMO_JITTER = 103
CHUNK_NOISE = 104
PARAM_INIT = 105
TRAIN = 106
EPISODE = 107
EVAL = 108
GRID_BOOTSTRAP = 109

_MASK = (1 << 63) - 1


def stream(*fields: int) -> np.random.Generator:
    """Independent generator for an integer key tuple."""
    key = [int(f) & _MASK for f in fields]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def derive_seed(*fields: int) -> int:
    """Stable 63-bit sub-seed for an integer key tuple."""
    key = [int(f) & _MASK for f in fields]
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0] >> 1)
