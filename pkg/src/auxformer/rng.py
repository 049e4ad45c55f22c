"""Named, splittable random streams.

Every stream is a Philox (counter-based) generator keyed by the top-level seed
plus a path of labels, so a sample's corruption draw depends only on
``(seed, purpose, epoch, index)`` and never on evaluation order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"stream labels must be non-negative, got {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed: int, *labels) -> np.random.Generator:
    """Generator for ``seed`` refined by ``labels`` (strings or non-negative ints)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(x) for x in labels))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *labels) -> int:
    """Integer seed for a named sub-experiment, drawn from :func:`stream`."""
    return int(stream(seed, *labels).integers(2**63))
