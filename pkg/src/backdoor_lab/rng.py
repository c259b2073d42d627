"""Seeded random streams.

Every consumer of randomness takes a :class:`numpy.random.Generator`.
Independent streams are derived from one integer seed plus string keys, so
adding a new consumer never shifts the draws seen by an existing one.
"""

import zlib

import numpy as np


def make_rng(seed, *keys):
    """Return a PCG64 generator for ``seed`` and the named sub-stream ``keys``.

    >>> a = make_rng(7, "train").random()
    >>> b = make_rng(7, "train").random()
    >>> a == b
    True
    """
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    spawn_key = tuple(zlib.crc32(str(k).encode("utf-8")) for k in keys)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(rng):
    """Draw a fresh 63-bit seed from ``rng`` for handing to a sub-component."""
    return int(rng.integers(0, 2**63 - 1))
