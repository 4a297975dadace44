"""Deterministic seed derivation."""

from __future__ import annotations

import hashlib

SEED_MASK = (1 << 63) - 1


def derive(*parts: object) -> int:
    """Hash arbitrary parts into a non-negative 63-bit seed."""
    h = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") & SEED_MASK


def shot_seed(run_seed: int, shot_index: int) -> int:
    """Seed of the first attempt for a shot; retries add one per attempt."""
    # leave headroom so seed + retries stays within 63 bits
    return derive("shot", run_seed, shot_index) >> 8
