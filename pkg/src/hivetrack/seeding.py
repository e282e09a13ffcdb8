"""Named random substreams derived from one global seed."""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(name.encode())])))


_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def hash_uniform(*keys) -> np.ndarray:
    """Stateless uniform [0, 1) values from integer keys (broadcast together).

    Used where a value must not depend on which region of an image is
    evaluated, e.g. per-pixel sensor noise.
    """
    with np.errstate(over="ignore"):
        h = np.uint64(0x9E3779B97F4A7C15)
        for k in keys:
            h = _splitmix(h ^ np.asarray(k, dtype=np.int64).astype(np.uint64))
        return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _splitmix(z):
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))
