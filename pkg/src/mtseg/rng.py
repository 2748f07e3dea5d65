"""Deterministic random stream derivation.

Every stochastic piece of the pipeline (weight init, shape jitter, noise,
shuffles, augmentation draws, dropout masks) pulls from its own stream,
derived from the experiment seed plus a tuple of labels.  Streams are
counter-based (Philox), so the same (seed, labels) tuple yields the same
sequence on any platform and independent tuples never collide in practice.
"""

import hashlib

import numpy as np


def derive_key(seed, *labels):
    """Hash (seed, labels) into a 128-bit integer Philox key."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def stream(seed, *labels):
    """Return a numpy Generator dedicated to (seed, *labels)."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *labels)))
