"""Named RNG substreams: all randomness flows from one manifest seed."""

import numpy as np

from ._pykernels import fnv1a64


def substream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator derived from (seed, purpose string)."""
    return np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF,
                                fnv1a64(purpose.encode("utf-8"), 0)])
    )
