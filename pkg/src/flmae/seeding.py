"""Deterministic RNG streams.

Every stochastic choice in a run (init, partition shuffles, client batch
order, per-image masks, client subsampling) draws from its own stream derived
from the master seed plus a structural path, so results do not depend on
execution order and parallel client training would reproduce the sequential
results exactly.
"""

import numpy as np

_TAGS = {
    "init": 1, "corpus": 2, "partition": 3, "sample": 4,
    "local": 5, "mask": 6, "eval": 7, "probe": 8,
}


def _key(part) -> int:
    if isinstance(part, str):
        return _TAGS[part]
    return int(part)


def rng_for(master_seed: int, *path) -> np.random.Generator:
    """Independent generator for (master_seed, path...); stable across runs."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(seq))
