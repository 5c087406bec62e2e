"""Deterministic RNG substreams.

Every stochastic routine takes a master seed and derives one independent
substream per unit of work (bootstrap draw, simulation replicate) as
``SeedSequence(entropy=master_seed, spawn_key=(stream,...))``.  Results are
therefore reproducible from ``(seed, config)`` alone and independent of
execution order, so parallel evaluation cannot change them.
"""

import numpy as np


def substream(master_seed: int, *stream: int) -> np.random.Generator:
    """Generator for substream ``stream`` of ``master_seed`` (PCG64)."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(seq))
