"""Named sub-seeds derived from one top-level seed.

Each consumer of randomness (data generation, split, init, dropout, shuffle)
gets its own stream, so changing how one of them draws numbers never shifts
the others.
"""

import numpy as np

_STREAMS = {"data": 0, "split": 1, "init": 2, "dropout": 3, "shuffle": 4}


def sub_seed(seed: int, stream: str) -> int:
    if stream not in _STREAMS:
        raise KeyError(f"unknown random stream {stream!r}")
    ss = np.random.SeedSequence([int(seed), _STREAMS[stream]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([sub_seed(seed, stream), *map(int, extra)])
