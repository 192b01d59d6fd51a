"""Deterministic per-purpose RNG derivation.

All randomness in the project flows from a single master seed.  Each consumer
derives its own counter-based stream from (seed, purpose labels), so any
component can be re-run in isolation and reproduce the exact same draws
regardless of execution order.
"""

import hashlib

import numpy as np


def derive_key(seed, *labels):
    """Map (seed, labels...) to a stable 128-bit integer key."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:16], "little")


def derive_rng(seed, *labels):
    """A numpy Generator on an independent Philox stream for this purpose."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *labels)))
