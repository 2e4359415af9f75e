from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import skipgram_counter_ref, skipgram_vector_ref
from pedefense.skipgrams import (
    SKIPGRAM_HASH_SEED,
    InputTooLarge,
    SkipgramConfig,
    enumerate_skipgrams,
    skipgram_vector,
    skipgram_vector_auto,
)


class TestConfig:
    def test_defaults(self):
        config = SkipgramConfig()
        assert (config.n, config.k, config.buckets) == (3, 3, 2 ** 16)

    @pytest.mark.parametrize("kwargs", [
        {"n": 0}, {"k": -1}, {"buckets": 1000}, {"work_bound": 0},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            SkipgramConfig(**kwargs)


class TestEnumerate:
    def test_input_shorter_than_n(self):
        assert enumerate_skipgrams(b"AB", 3, 3) == {}

    def test_plain_bigram(self):
        counts = enumerate_skipgrams(b"AB", 2, 0)
        assert counts == {(0x41, 0x42): 1}

    def test_abcde_all_ten_triples(self):
        counts = enumerate_skipgrams(b"ABCDE", 3, 3)
        assert counts == skipgram_counter_ref(b"ABCDE", 3, 3)
        assert sum(counts.values()) == 10

    @given(st.binary(max_size=48),
           st.integers(min_value=1, max_value=4),
           st.integers(min_value=0, max_value=4))
    @settings(max_examples=120, deadline=None)
    def test_matches_exhaustive_oracle(self, data, n, k):
        assert enumerate_skipgrams(data, n, k) == skipgram_counter_ref(data, n, k)


class TestVector:
    CFG = SkipgramConfig(buckets=512)

    def test_empty_input_zero_vector(self):
        assert not skipgram_vector(b"", self.CFG).any()

    def test_matches_hashed_oracle(self):
        rng = random.Random(3)
        for _ in range(25):
            data = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 128)))
            ours = skipgram_vector(data, self.CFG)
            ref = skipgram_vector_ref(data, 3, 3, 512, SKIPGRAM_HASH_SEED)
            assert np.array_equal(ours, np.asarray(ref))

    def test_fast_path_agrees_with_oracle_for_nonstandard_k(self):
        rng = random.Random(4)
        data = bytes(rng.randrange(256) for _ in range(200))
        fast = skipgram_vector(data, SkipgramConfig(n=3, k=2, buckets=256))
        ref = skipgram_vector_ref(data, 3, 2, 256, SKIPGRAM_HASH_SEED)
        assert np.array_equal(fast, np.asarray(ref))

    def test_generic_n_supported(self):
        data = b"ABCDEFG"
        vec = skipgram_vector(data, SkipgramConfig(n=2, k=1, buckets=64))
        ref = skipgram_vector_ref(data, 2, 1, 64, SKIPGRAM_HASH_SEED)
        assert np.array_equal(vec, np.asarray(ref))

    def test_additivity_lower_bound(self):
        rng = random.Random(5)
        for _ in range(10):
            x = bytes(rng.randrange(256) for _ in range(rng.randrange(80)))
            y = bytes(rng.randrange(256) for _ in range(rng.randrange(80)))
            vx = skipgram_vector(x, self.CFG)
            vy = skipgram_vector(y, self.CFG)
            vxy = skipgram_vector(x + y, self.CFG)
            assert (vxy >= np.maximum(vx, vy)).all()

    def test_concatenation_seam_accounting(self):
        """vector(x || y) equals vector(x) + vector(y) plus the seam tuples."""
        import itertools

        from oracles import fnv1a32_ref

        rng = random.Random(6)
        cfg = self.CFG
        for _ in range(8):
            x = bytes(rng.randrange(256) for _ in range(rng.randrange(10, 60)))
            y = bytes(rng.randrange(256) for _ in range(rng.randrange(10, 60)))
            data = x + y
            boundary = len(x)
            seam = np.zeros(cfg.buckets, dtype=np.int64)
            for idx in itertools.combinations(range(len(data)), 3):
                if not all(idx[j + 1] - idx[j] - 1 <= 3 for j in range(2)):
                    continue
                if idx[0] < boundary <= idx[2]:
                    h = fnv1a32_ref(bytes(data[i] for i in idx),
                                    SKIPGRAM_HASH_SEED)
                    seam[h % cfg.buckets] += 1
            vx = skipgram_vector(x, cfg)
            vy = skipgram_vector(y, cfg)
            vxy = skipgram_vector(data, cfg)
            assert np.array_equal(vxy, vx + vy + seam)

    def test_determinism(self):
        data = bytes(range(256)) * 4
        assert np.array_equal(skipgram_vector(data, self.CFG),
                              skipgram_vector(data, self.CFG))


class TestWorkBound:
    def test_input_too_large_raises_with_stride(self):
        cfg = SkipgramConfig(buckets=256, work_bound=500)
        with pytest.raises(InputTooLarge) as err:
            skipgram_vector(bytes(2000), cfg)
        assert err.value.suggested_stride > 1

    def test_auto_fallback_matches_explicit_stride(self):
        cfg = SkipgramConfig(buckets=256, work_bound=500)
        data = bytes(random.Random(7).randrange(256) for _ in range(3000))
        try:
            skipgram_vector(data, cfg)
            raise AssertionError("work bound should trip")
        except InputTooLarge as err:
            explicit = skipgram_vector(data, cfg, stride=err.suggested_stride)
        assert np.array_equal(skipgram_vector_auto(data, cfg), explicit)

    def test_sampled_extraction_is_subset(self):
        cfg = SkipgramConfig(buckets=256)
        data = bytes(random.Random(8).randrange(256) for _ in range(500))
        full = skipgram_vector(data, cfg)
        sampled = skipgram_vector(data, cfg, stride=4)
        assert (sampled <= full).all()
        assert sampled.sum() > 0
