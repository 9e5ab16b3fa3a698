"""Seeded, splittable random streams.

Every random draw in the package comes from a Philox (counter-based)
generator keyed by ``SeedSequence(seed, spawn_key=keys)``.  Keys are small
integers or string tags; string tags are mapped through CRC32 so the
derivation is stable across Python versions and platforms.  A per-sample
stream is ``substream(seed, "prior", i)``, so sample ``i`` does not depend
on how many samples were drawn before it or in which process.
"""

import zlib

import numpy as np


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError(f"stream keys must be nonnegative, got {k}")
    return k


def substream(seed, *keys) -> np.random.Generator:
    """Return the generator for stream ``keys`` under master ``seed``."""
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    ss = np.random.SeedSequence(seed, spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *keys) -> int:
    """A 63-bit integer seed derived from ``(seed, keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
