"""Counter-based random streams addressed by integer coordinates.

A stream for ``(seed, a, b, ...)`` is a Philox generator whose key is
derived from the coordinates alone, so the numbers a path or player sees do
not depend on how work is split across threads.
"""

import numpy as np


def stream(seed, *coords):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(c) for c in coords))
    key = ss.generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def categorical(rng_or_u, probs):
    """Sample one index per row of ``probs`` (shape (k, n)) by inverse CDF.

    Accepts a generator or a ready vector of uniforms.
    """
    probs = np.atleast_2d(probs)
    u = rng_or_u.random(probs.shape[0]) if hasattr(rng_or_u, "random") else rng_or_u
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    return (u[:, None] >= cdf).sum(axis=1)
