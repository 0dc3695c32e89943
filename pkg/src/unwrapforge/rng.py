"""Counter-based random streams keyed by (seed, *path)."""

import numpy as np


def make_rng(seed, *path):
    """Return a Philox generator for the stream ``(seed, path...)``.

    Streams with different paths are statistically independent, so a scene or
    tile can be regenerated without replaying the streams of its neighbours.
    """
    if isinstance(seed, np.random.Generator):
        if path:
            raise TypeError("cannot derive a sub-stream from a Generator")
        return seed
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


# named sub-streams within one scene
STREAM_SOURCES = 1
STREAM_STRATIFIED = 2
STREAM_TURBULENCE = 3
STREAM_PATCHY = 4
STREAM_MEASUREMENT = 5
STREAM_SCENE_PARAMS = 6
