"""Domain-separated random streams.

Every consumer of randomness (subsampling, grouping, noise, augmentation,
initialisation, data generation) draws from its own stream keyed by a purpose
tag plus integer keys. Streams never overlap, so for instance the grouping of
a step cannot correlate with the batch it groups.
"""

import zlib

import numpy as np

from dpgcl.errors import ParameterError


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(tag: str, *keys: int) -> np.random.Generator:
    """Returns a fresh generator that is a pure function of ``(tag, *keys)``."""
    entropy = [tag_id(tag)]
    for key in keys:
        key = int(key)
        if key < 0:
            raise ParameterError(f"stream keys must be nonnegative, got {key}")
        entropy.append(key)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
