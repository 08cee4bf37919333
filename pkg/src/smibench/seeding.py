"""Stable seed derivation for replayable per-run randomness."""

from __future__ import annotations

import hashlib


def derive_seed(master_seed: int, *parts) -> int:
    """64-bit seed from a keyed hash of the master seed and a run key.

    Platform independent and collision resistant, so every run in a grid
    gets its own reproducible stream without storing per-run seeds.
    """
    key = ":".join([str(int(master_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
