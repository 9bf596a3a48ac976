"""Seeded random sub-streams.

All randomness in a run flows from one root seed. Named sub-streams (mask,
init, batch, folds, ...) are derived so each component can be reproduced in
isolation without perturbing the others.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), key]))
