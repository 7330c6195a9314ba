"""Named random substreams derived from one root seed.

Every source of randomness in the package draws from ``substream(seed, name)``
so that a single root seed reproduces the whole run: data generation, weight
init, episode sampling and prototype sampling each get their own stream.
"""

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the given named stream under a root seed."""
    words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF]
    words.extend(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(words))
