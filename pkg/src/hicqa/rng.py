"""Deterministic, splittable random streams.

Every source of randomness in the package derives from a Philox
counter-based generator keyed by (seed, stream, *path), so any draw is
reproducible from its coordinates alone, independent of call order.
"""

import numpy as np

STREAM_INIT = 0
STREAM_DROPOUT = 1
STREAM_SYNTH = 2


def rng_for(seed, stream, *path):
    """Generator for a named stream, e.g. rng_for(seed, STREAM_DROPOUT, step, layer)."""
    key = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), *map(int, path)))
    return np.random.Generator(np.random.Philox(key))
