"""Deterministic seed derivation: one root seed, split by stable labels."""

from __future__ import annotations

import hashlib


def split_seed(root: int, label: str) -> int:
    """Derive an independent 64-bit stream seed from (root, label)."""
    digest = hashlib.sha256(f"{int(root)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
