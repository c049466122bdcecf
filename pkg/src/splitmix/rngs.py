"""Deterministic RNG stream derivation.

Every source of randomness in a run is a dedicated stream derived from the
experiment seed plus a purpose tag (and any identifying indices such as round
or client id).  Streams never interact, so the simulation result is a pure
function of (config, seed) and is independent of the order in which client
tasks complete.
"""

import numpy as np

# purpose tags; values are arbitrary but frozen — changing them changes runs
INIT = 1        # model / base initialization
SAMPLER = 2     # base-model sampler permutation
PARTICIPATION = 3
BATCHES = 4     # per-(round, client) minibatch order
ATTACK = 5      # per-(round, client, base) PGD random start
DATA = 6        # synthetic dataset generation
PARTITION = 7   # client shard assignment
VALSPLIT = 8    # per-client train/validation split
POST_BN = 9     # batch order during BN statistics re-estimation


def rng_for(*key: int) -> np.random.Generator:
    """Independent generator for an integer key path, e.g. rng_for(seed, BATCHES, t, k)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))
