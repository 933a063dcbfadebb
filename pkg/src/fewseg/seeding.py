"""Deterministic seed derivation.

All randomness in a run flows from one base seed; each component draws
from a stream named after it, so toggling one component on or off never
shifts the initialization of another.
"""

from __future__ import annotations

import hashlib


def derive_seed(base_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
