"""Feature-hashing primitives shared by the extractors.

Every hashed feature group in this package uses 32-bit FNV-1a with a fixed
per-group seed.  The construction is frozen here on purpose: trained model
files index into hashed buckets, so changing any constant below silently
invalidates every saved model.

Signed hashing maps a token to ``(index, sign)`` where the index is the
hash modulo the bucket count and the sign comes from the top hash bit.
The sign trick keeps collisions unbiased in expectation; byte-skipgram
counts deliberately do *not* use it (see :mod:`pedefense.skipgrams`).
"""

from __future__ import annotations

from typing import Iterable, Tuple

import numpy as np

FNV_OFFSET_BASIS = 0x811C9DC5
FNV_PRIME = 0x01000193
_MASK32 = 0xFFFFFFFF


def fnv1a32(data: bytes, seed: int = 0) -> int:
    """32-bit FNV-1a of ``data``, with ``seed`` xored into the offset basis."""
    h = FNV_OFFSET_BASIS ^ (seed & _MASK32)
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK32
    return h


def _token_bytes(token) -> bytes:
    if isinstance(token, bytes):
        return token
    return str(token).encode("utf-8", "replace")


def token_bucket(token, buckets: int, seed: int = 0) -> Tuple[int, int]:
    """Bucket index and sign (+1/-1) for a single token."""
    h = fnv1a32(_token_bytes(token), seed)
    sign = 1 if (h >> 31) == 0 else -1
    return h % buckets, sign


def hash_strings_signed(tokens: Iterable, buckets: int, seed: int = 0) -> np.ndarray:
    """Signed hashing of a token multiset into ``buckets`` counts."""
    out = np.zeros(buckets, dtype=np.float64)
    for tok in tokens:
        idx, sign = token_bucket(tok, buckets, seed)
        out[idx] += sign
    return out


def hash_pairs_signed(pairs: Iterable[Tuple[object, float]], buckets: int,
                      seed: int = 0) -> np.ndarray:
    """Signed hashing of ``(token, value)`` pairs; values accumulate with sign."""
    out = np.zeros(buckets, dtype=np.float64)
    for tok, value in pairs:
        idx, sign = token_bucket(tok, buckets, seed)
        out[idx] += sign * float(value)
    return out


def fnv1a32_u8_triples(b0: np.ndarray, b1: np.ndarray, b2: np.ndarray,
                       seed: int = 0) -> np.ndarray:
    """Vectorised FNV-1a over three-byte sequences.

    Bit-for-bit identical to ``fnv1a32(bytes([x, y, z]), seed)`` applied
    elementwise; used by the skipgram fast path.
    """
    prime = np.uint32(FNV_PRIME)
    h = np.full(b0.shape, FNV_OFFSET_BASIS ^ (seed & _MASK32), dtype=np.uint32)
    for part in (b0, b1, b2):
        h = (h ^ part.astype(np.uint32)) * prime
    return h
