"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np


def substream(root_seed, *names):
    """Return a Generator for the stream ``names`` under ``root_seed``.

    Streams with different names are statistically independent, and adding a
    new stream never perturbs an existing one.
    """
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(root_seed), spawn_key=key))


def derive_seed(root_seed, *names):
    """Integer seed for APIs that want an int rather than a Generator."""
    return int(substream(root_seed, *names).integers(0, 2**31 - 1))
