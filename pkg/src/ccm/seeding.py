"""Named sub-seed derivation so one root seed drives every RNG."""

from __future__ import annotations

import hashlib


def derive_seed(root: int, name: str) -> int:
    digest = hashlib.sha256(f"{root}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
