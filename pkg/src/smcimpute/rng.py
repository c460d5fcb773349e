"""Named, reproducible random streams.

Every stochastic stage of the package (chain initialization, posterior
draws, rejection loops, data generation, masking) pulls its generator from
`stream(root, *keys)`.  Streams are derived from a root seed plus a path of
string/integer keys via numpy's SeedSequence spawn keys, so two streams with
different paths are statistically independent and a given path always yields
the same generator regardless of thread or process count.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["subsequence", "stream"]


def _key_words(key) -> tuple[int, ...]:
    """Map one path key to uint32 words usable in a spawn key."""
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be nonnegative, got {key}")
        return (int(key) & 0xFFFFFFFF, int(key) >> 32)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in (0, 4))


def subsequence(root, *keys) -> np.random.SeedSequence:
    """SeedSequence for the stream identified by (root, *keys)."""
    if isinstance(root, np.random.SeedSequence):
        entropy, base = root.entropy, tuple(root.spawn_key)
    else:
        entropy, base = int(root), ()
    words: list[int] = []
    for key in keys:
        words.extend(_key_words(key))
    return np.random.SeedSequence(entropy=entropy, spawn_key=base + tuple(words))


def stream(root, *keys) -> np.random.Generator:
    """Generator for the stream identified by (root, *keys)."""
    return np.random.default_rng(subsequence(root, *keys))
