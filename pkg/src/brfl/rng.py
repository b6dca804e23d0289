"""Deterministic RNG streams keyed by structured scopes.

Every random draw in the simulator comes from a generator built here, keyed
by (seed, purpose, round, node, ...) parts. A run is then a pure function of
its seed, independent of call interleaving and host thread count.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1

StreamKey = int | str


def _entropy_words(scope: tuple[StreamKey, ...]) -> list[int]:
    words: list[int] = []
    for part in scope:
        if isinstance(part, bool):
            # bool is an int subclass; reject it so True/1 cannot collide silently
            raise TypeError("bool is not a valid stream key")
        if isinstance(part, (int, np.integer)):
            v = int(part) & _MASK64
            words.append(v & 0xFFFFFFFF)
            words.append(v >> 32)
        elif isinstance(part, str):
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            words.extend(int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4))
        else:
            raise TypeError(f"unsupported stream key type: {type(part)!r}")
    return words


def stream(*scope: StreamKey) -> np.random.Generator:
    """Return a PCG64 generator deterministically keyed by the scope parts."""
    if not scope:
        raise ValueError("stream() requires at least one key part")
    return np.random.default_rng(np.random.SeedSequence(_entropy_words(scope)))


def derive_seed(*scope: StreamKey) -> int:
    """Collapse a scope into one nonnegative 63-bit int, for APIs taking a plain seed."""
    if not scope:
        raise ValueError("derive_seed() requires at least one key part")
    h = hashlib.sha256()
    for word in _entropy_words(scope):
        h.update(word.to_bytes(4, "big"))
    return int.from_bytes(h.digest()[:8], "big") >> 1
