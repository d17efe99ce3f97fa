"""Counter-based random streams keyed by (seed, label...) tuples.

Every stream is a Philox generator whose key comes from a ``SeedSequence``
built from the master seed and a stable hash of the labels, so a device's
stream does not depend on which other devices drew before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label) -> list[int]:
    if isinstance(label, (int, np.integer)) and label >= 0:
        return [int(label) & 0xFFFFFFFF, int(label) >> 32]
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return list(np.frombuffer(digest, dtype=np.uint32).tolist())


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``seed`` and an arbitrary label path."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for lab in labels:
        words.extend(_label_words(lab))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def derive_seed(seed: int, *labels) -> int:
    """A 63-bit integer seed derived from ``seed`` and labels."""
    return int(stream(seed, "derive", *labels).integers(0, 2**63 - 1))
