"""Deterministic random-number streams.

All randomness in the package flows through named Philox4x64-10 streams
derived from a single 64-bit run seed via numpy's SeedSequence spawn
keys.  A stream is identified by an integer path, so any consumer can be
re-derived independently of execution order or thread scheduling:

    stream(seed, DOMAIN_FOREST, tree_index)      per-tree bootstrap + splits
    stream(seed, DOMAIN_CV)                      fold partition
    stream(seed, DOMAIN_IMPORTANCE, repeat, f)   one permutation
    stream(seed, DOMAIN_FIXTURE, sub)            fixture generator domains
"""

import numpy as np

DOMAIN_FOREST = 0
DOMAIN_CV = 1
DOMAIN_IMPORTANCE = 2
DOMAIN_FIXTURE = 3


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return the Philox generator for stream `path` of run `seed`."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
