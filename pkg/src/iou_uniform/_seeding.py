"""Deterministic sub-stream derivation.

Every stochastic stage draws from a generator keyed by ``(master seed, *keys)``
so results do not depend on execution order or the number of worker processes.
"""

from __future__ import annotations

import numpy as np

# stream identifiers
SCENES_TRAIN = 1
SCENES_TEST = 2
UNIFORM = 3
RPN_TRAIN = 4
RPN_TEST = 5
TRAIN = 6
INFER = 7
HELDOUT = 8


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(keys)))
