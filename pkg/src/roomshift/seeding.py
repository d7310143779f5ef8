"""Deterministic hierarchical RNG derivation.

Every random decision in the pipeline draws from a Generator derived from
(master seed, path of string/int keys). The same (seed, path) always yields
the same stream, independent of call order, platform, or parallel split,
which is what makes dataset builds and training runs byte-reproducible.
"""

import hashlib

import numpy as np


def _path_words(path):
    # Stable 32-bit words from the path; sha256 keeps keys order-sensitive.
    h = hashlib.sha256()
    for key in path:
        h.update(repr(key).encode("utf-8"))
        h.update(b"\x00")
    digest = h.digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def child_seed(master_seed, *path):
    """SeedSequence for the stream addressed by `path` under `master_seed`."""
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, *_path_words(path)])


def child_rng(master_seed, *path):
    """Generator for the stream addressed by `path` under `master_seed`."""
    return np.random.Generator(np.random.PCG64(child_seed(master_seed, *path)))
