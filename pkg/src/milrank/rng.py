"""Counter-based random streams.

Every stochastic piece of the pipeline (weight init, batch sampling, dropout
masks, synthetic data) draws from its own Philox stream addressed by
(seed, namespace, counter words). Streams are O(1) to construct, independent
of each other, and need no global state, so any iteration of a run can be
reproduced in isolation.
"""

from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1

# stream namespaces (second key word)
NS_INIT = 0
NS_BATCH = 1
NS_DROPOUT = 2
NS_SYNTH = 3
NS_GRADCHECK = 4


def stream(seed: int, namespace: int, c1: int = 0, c2: int = 0, c3: int = 0) -> np.random.Generator:
    """Generator over the Philox stream keyed by (seed, namespace) at counter
    position (0, c1, c2, c3). The low counter word is left to the generator."""
    key = np.array([seed & _U64, namespace & _U64], dtype=np.uint64)
    counter = np.array([0, c1 & _U64, c2 & _U64, c3 & _U64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))
