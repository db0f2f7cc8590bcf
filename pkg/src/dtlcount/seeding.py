"""Deterministic derivation of independent RNG streams.

Every randomized stage derives its generator from (root seed, purpose tags),
so pipelines are pure functions of their seed: re-running any stage with the
same tags reproduces its stream exactly, and no stage's draws shift when
another stage changes how much randomness it consumes.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def seed_for(root_seed: int, *tags) -> int:
    """Stable 64-bit child seed for (root_seed, tags)."""
    text = "\x1f".join(str(t) for t in tags).encode("utf-8")
    digest = zlib.crc32(text)
    # Mix tag digest and root seed through SeedSequence's entropy pooling.
    return int(np.random.SeedSequence([int(root_seed) & _MASK64, digest]).generate_state(1)[0])


def rng_for(root_seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(seed_for(root_seed, *tags))
