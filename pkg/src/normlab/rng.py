"""Named random streams derived from one top-level seed.

A stream is keyed by ``sha256(f"{seed}/{name}/{parts...}")`` and backed by the
counter-based Philox generator, so draws never depend on call order elsewhere
or on how work is split across threads.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, name: str, *parts) -> int:
    text = "/".join([str(int(seed)), name, *map(str, parts)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:16], "little")


def stream(seed: int, name: str, *parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name, *parts)))


def derive_seed(seed: int, name: str, *parts) -> int:
    """A 31-bit child seed, for places that want a plain integer."""
    return stream_key(seed, name, *parts) % (2**31 - 1)
