"""Per-stage random streams derived from one master seed."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *names) -> int:
    """Stable 64-bit sub-seed for ``(master, *names)``; adding stages never shifts others."""
    key = "/".join([str(int(master))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def derive_rng(master: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))
