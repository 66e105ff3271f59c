"""Deterministic RNG derivation.

Every random draw in the package comes from a counter-based Philox generator
keyed by (seed, component code, ...extra indices), so any single sample or
batch order can be regenerated in isolation without replaying a stream.
"""

import numpy as np

CODE_SOURCE_DATA = 1
CODE_TARGET_DATA = 2
CODE_INIT = 10
CODE_BATCH_ORDER = 11
CODE_SPLIT = 12


def derive_rng(*keys):
    """A fresh Generator keyed by the given integers. Same keys, same
    stream, on any platform."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence([int(k) for k in keys])))
