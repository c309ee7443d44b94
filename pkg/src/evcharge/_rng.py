"""Named, reproducible random sub-streams derived from one root seed."""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed, *names):
    """Return a Generator for the stream ``seed/names[0]/names[1]/...``.

    Streams with different names are statistically independent, and a
    stream's draws do not depend on how many other streams were used.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(ss)


def derive_seed(seed, *names):
    """Integer seed for the named sub-stream (for APIs that take ints)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def as_generator(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
