"""Random streams of the synthetic world.

Every stream is xoshiro256** (randomgen's Xoshiro256) seeded through
numpy's SeedSequence([seed, *keys]), so a world is fixed by its seed.
"""
import numpy as np
from randomgen import Xoshiro256


def generator(seed, *keys):
    """The stream for (seed, *keys); equal arguments give equal streams."""
    return np.random.Generator(Xoshiro256(np.random.SeedSequence([seed, *keys])))
