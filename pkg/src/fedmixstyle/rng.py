"""Seeded random streams keyed by a derivation path.

Every stream is a numpy ``Generator`` backed by PCG64 and seeded through
``SeedSequence(root_seed, spawn_key=(tag, client, round))``. The purpose tag
is hashed with CRC-32 so the mapping is stable across interpreter runs.
Two calls with the same path always yield the same draw sequence, and
streams with different paths do not depend on the order they are created in.
"""

from __future__ import annotations

import zlib

import numpy as np


def purpose_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def derive_rng(root_seed: int, purpose: str, client_id: int = 0, round_idx: int = 0) -> np.random.Generator:
    if root_seed < 0:
        raise ValueError("root seed must be non-negative")
    ss = np.random.SeedSequence(
        entropy=int(root_seed),
        spawn_key=(purpose_key(purpose), int(client_id), int(round_idx)),
    )
    return np.random.Generator(np.random.PCG64(ss))
