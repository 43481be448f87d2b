"""Seed hierarchy for reproducible runs.

Every random draw in a run comes from a stream keyed by
``(master_seed, round, agent, purpose)``. The key is fed to numpy's
``SeedSequence`` as a spawn key, so streams are independent and a stream
can be rebuilt from its key alone, regardless of execution order.

Round-level streams use ``agent = SERVER``.
"""

import numpy as np

SERVER = -1

# purposes
MASK = 0
NOISE = 1
BATCH = 2
SELECT = 3
INIT = 4
DATA = 5


def stream(master_seed: int, *key: int) -> np.random.Generator:
    # spawn keys must be non-negative
    spawn_key = tuple(int(k) + 1 for k in key)
    ss = np.random.SeedSequence(int(master_seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(ss))


def agent_stream(master_seed: int, t: int, agent: int, purpose: int) -> np.random.Generator:
    return stream(master_seed, t, agent, purpose)


def round_stream(master_seed: int, t: int, purpose: int) -> np.random.Generator:
    return stream(master_seed, t, SERVER, purpose)


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
