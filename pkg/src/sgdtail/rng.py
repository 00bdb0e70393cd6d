"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by a
tuple ``(master_seed, tag, *indices)``.  A given key always yields the same
stream, so any batch, replica or grid cell can be regenerated on its own
without replaying what came before it, and results do not depend on the
order or the number of workers used to produce them.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_word(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def _key_words(seed: int, tag: str, indices: tuple[int, ...]) -> list[int]:
    seed = int(seed) & _MASK64
    words = [seed & 0xFFFFFFFF, seed >> 32, _tag_word(tag)]
    for i in indices:
        i = int(i)
        if i < 0:
            raise ValueError(f"stream index must be nonnegative, got {i}")
        words.extend([i & 0xFFFFFFFF, i >> 32])
    return words


def keyed_rng(seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, tag, *indices)``."""
    ss = np.random.SeedSequence(_key_words(seed, tag, indices))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, tag: str, *indices: int) -> int:
    """Derive an independent 64-bit seed by hashing ``(seed, tag, *indices)``."""
    ss = np.random.SeedSequence(_key_words(seed, tag, indices))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
