"""Master-seed fan-out.

Every subsystem draws from its own stream, derived as
``SeedSequence([master, STREAM_ID, *keys])``. Keys are usually
``(phase, episode_index)``. Changing how one subsystem consumes randomness
therefore never shifts the numbers another one sees.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "scenario": 0,   # map size and rover count per episode
    "map": 1,        # obstacle layout
    "kmeans": 2,     # region partition seeding
    "policy": 3,     # random / epsilon-greedy action draws
    "dropout": 4,
    "replay": 5,     # minibatch sampling
    "init": 6,       # network weights
}

PHASES = {"collect": 1, "anneal": 2, "frozen": 3, "eval": 4}


def _sequence(master: int, name: str, keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), STREAMS[name], *[int(k) for k in keys]])


def rng(master: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(_sequence(master, name, keys))


def seed(master: int, name: str, *keys: int) -> int:
    """A 63-bit integer seed for APIs that take plain ints."""
    return int(_sequence(master, name, keys).generate_state(2, np.uint64)[0] >> np.uint64(1))
