import hashlib

import numpy as np


def make_rng(seed):
    """Counter-based generator: the stream depends only on ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(seed, *labels):
    """Stable 64-bit child seed for a (seed, label...) path."""
    h = hashlib.sha256(repr((int(seed),) + tuple(labels)).encode())
    return int.from_bytes(h.digest()[:8], "little")
