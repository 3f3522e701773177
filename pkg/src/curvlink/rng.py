"""Counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, purpose, *counters)``.  Two streams with different
purposes or counters never overlap, and a stream can be re-created anywhere
(another process, another worker count) from its key alone.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _purpose_word(purpose):
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed, purpose, *counters):
    """Return a fresh ``numpy.random.Generator`` for the given key."""
    words = [int(seed) & _MASK64, _purpose_word(purpose)]
    words.extend(int(c) & _MASK64 for c in counters)
    seq = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed, purpose, *counters):
    """Derive a child u64 seed, e.g. for a sub-experiment."""
    words = stream(seed, purpose, *counters).integers(0, 2**63, size=1, dtype=np.int64)
    return int(words[0])
