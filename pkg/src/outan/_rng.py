import zlib

import numpy as np


def substream(seed, name):
    """Independent generator for a named consumer of the root ``seed``.

    Each name maps to a fixed spawn key, so probe variability, measurement
    noise and spike generation can be reproduced in isolation.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))
