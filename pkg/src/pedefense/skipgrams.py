"""Byte skipgrams hashed to absolute bucket counts.

A k-skip n-gram is an n-byte subsequence allowing up to k skipped positions
between consecutive bytes.  Counts are absolute and hashed with *unsigned*
accumulation: adding bytes to a file can only grow bucket counts, which is
exactly the property the monotone-constrained model needs.  Normalizing or
sign-hashing would let an attacker shrink counts by adding content, so
neither is done here.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

from .hashing import fnv1a32, fnv1a32_u8_triples

SKIPGRAM_HASH_SEED = 0x534B4950

DEFAULT_N = 3
DEFAULT_K = 3
DEFAULT_BUCKETS = 2 ** 16
DEFAULT_WORK_BOUND = 2 ** 31


class InputTooLarge(ValueError):
    """Full enumeration would exceed the work bound.

    Carries ``suggested_stride``: re-invoke with that start-index stride to
    fall back to deterministic sampled extraction.
    """

    def __init__(self, estimated: int, bound: int, suggested_stride: int):
        super().__init__(
            f"~{estimated} skipgram tuples exceed work bound {bound}; "
            f"retry with stride {suggested_stride}")
        self.estimated = estimated
        self.bound = bound
        self.suggested_stride = suggested_stride


@dataclass(frozen=True)
class SkipgramConfig:
    n: int = DEFAULT_N
    k: int = DEFAULT_K
    buckets: int = DEFAULT_BUCKETS
    work_bound: int = DEFAULT_WORK_BOUND

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.buckets < 1 or self.buckets & (self.buckets - 1):
            raise ValueError("buckets must be a power of two")
        if self.work_bound < 1:
            raise ValueError("work_bound must be positive")


def estimated_tuples(length: int, n: int, k: int) -> int:
    """Upper bound on the number of enumerated tuples."""
    if length < n:
        return 0
    return length * (k + 1) ** (n - 1)


def _iter_index_tuples(length: int, n: int, k: int,
                       stride: int = 1) -> Iterator[Tuple[int, ...]]:
    """All index tuples i1 < ... < in with consecutive gaps in [0, k].

    ``stride`` subsamples the first index (deterministic fallback for
    pathological inputs).
    """
    for start in range(0, length, stride):
        if start + n > length:
            break
        stack = [(start,)]
        while stack:
            prefix = stack.pop()
            if len(prefix) == n:
                yield prefix
                continue
            base = prefix[-1] + 1
            remaining = n - len(prefix) - 1
            for gap in range(k + 1):
                nxt = base + gap
                if nxt + remaining < length:
                    stack.append(prefix + (nxt,))


def enumerate_skipgrams(data: bytes, n: int = DEFAULT_N,
                        k: int = DEFAULT_K) -> Counter:
    """Multiset of n-byte tuples with each consecutive index gap in [0, k]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if k < 0:
        raise ValueError("k must be >= 0")
    counts: Counter = Counter()
    for idx in _iter_index_tuples(len(data), n, k):
        counts[tuple(data[i] for i in idx)] += 1
    return counts


def _vector_n3(data: bytes, config: SkipgramConfig, stride: int) -> np.ndarray:
    a = np.frombuffer(data, dtype=np.uint8)
    mask = np.uint32(config.buckets - 1)
    out = np.zeros(config.buckets, dtype=np.int64)
    for g1 in range(config.k + 1):
        for g2 in range(config.k + 1):
            o2 = 1 + g1
            o3 = 2 + g1 + g2
            m = len(a) - o3
            if m <= 0:
                continue
            starts = np.arange(0, m, stride)
            h = fnv1a32_u8_triples(a[starts], a[starts + o2], a[starts + o3],
                                   seed=SKIPGRAM_HASH_SEED)
            out += np.bincount(h & mask, minlength=config.buckets)
    return out


def skipgram_vector(data: bytes, config: SkipgramConfig = SkipgramConfig(),
                    stride: int = 1) -> np.ndarray:
    """Hashed absolute skipgram counts (length ``config.buckets``).

    Raises :class:`InputTooLarge` when full enumeration (``stride == 1``)
    would exceed the configured work bound.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    estimate = estimated_tuples(len(data), config.n, config.k)
    if stride == 1 and estimate > config.work_bound:
        raise InputTooLarge(estimate, config.work_bound,
                            suggested_stride=math.ceil(estimate / config.work_bound))
    if config.n == 3:
        return _vector_n3(data, config, stride)
    out = np.zeros(config.buckets, dtype=np.int64)
    mask = config.buckets - 1
    for idx in _iter_index_tuples(len(data), config.n, config.k, stride):
        h = fnv1a32(bytes(data[i] for i in idx), seed=SKIPGRAM_HASH_SEED)
        out[h & mask] += 1
    return out


def skipgram_vector_auto(data: bytes,
                         config: SkipgramConfig = SkipgramConfig()) -> np.ndarray:
    """Full extraction, falling back to stride sampling on oversized inputs."""
    try:
        return skipgram_vector(data, config)
    except InputTooLarge as exc:
        return skipgram_vector(data, config, stride=exc.suggested_stride)
