from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import byte_entropy_histogram_ref, fnv1a32_ref, signed_bucket_ref
from pedefense import pe
from pedefense.features import (
    SEED_IMPORT_LIBS,
    SEED_IMPORT_PAIRS,
    SEED_SECTION_NAMES,
    VARIANTS,
    VariantConfig,
    byte_entropy_histogram,
    byte_histogram,
    data_directory_features,
    extract_features,
    import_export_features,
    string_features,
    strip_string_bytes,
)
from pedefense.fixtures import SectionSpec, build_pe, minimal_fixture
from pedefense.hashing import fnv1a32, token_bucket
from pedefense.redteam import append_overlay, apply, fill_slack


class TestHashing:
    @given(st.binary(max_size=64), st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=200)
    def test_fnv_matches_reference(self, data, seed):
        assert fnv1a32(data, seed) == fnv1a32_ref(data, seed)

    def test_signed_bucket_matches_reference(self):
        for token in ("kernel32.dll", ".text", "a:b", "x" * 40):
            for buckets, seed in ((50, SEED_SECTION_NAMES), (256, SEED_IMPORT_LIBS)):
                assert token_bucket(token, buckets, seed) \
                    == signed_bucket_ref(token, buckets, seed)


class TestByteHistogram:
    def test_all_zero_bytes(self):
        hist = byte_histogram(b"\x00" * 1024)
        assert hist[0] == 1.0 and hist[1:].sum() == 0.0

    def test_single_byte(self):
        hist = byte_histogram(b"\x41")
        assert hist[0x41] == 1.0

    def test_two_values(self):
        hist = byte_histogram(b"\x00\x01")
        assert hist[0] == 0.5 and hist[1] == 0.5

    def test_empty_is_zero(self):
        assert byte_histogram(b"").sum() == 0.0


class TestByteEntropyHistogram:
    def test_all_zero_mass_at_origin(self):
        hist = byte_entropy_histogram(b"\x00" * 4096)
        assert hist[0] == 1.0
        assert hist.sum() == pytest.approx(1.0, abs=1e-12)

    def test_uniform_window_lands_in_top_row(self):
        data = bytes(range(256)) * 8          # one window, all 16 nibbles equal
        grid = byte_entropy_histogram(data).reshape(16, 16)
        assert grid[15].sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(grid[15], 1 / 16)

    def test_matches_oracle_on_random_data(self):
        rng = random.Random(17)
        for trial in range(12):
            n = rng.choice([0, 100, 255, 256, 300, 2047, 2048, 3000, 5000, 9000])
            data = bytes(rng.randrange(256) for _ in range(n))
            ours = byte_entropy_histogram(data)
            ref = byte_entropy_histogram_ref(data)
            assert np.allclose(ours, ref, atol=1e-9), (trial, n)

    def test_short_input_still_normalizes(self):
        hist = byte_entropy_histogram(b"ab")
        assert hist.sum() == pytest.approx(1.0, abs=1e-12)


class TestStringFeatures:
    def test_no_strings_all_zero(self):
        vec = string_features(b"\x00\x01\x02", include_histogram=True)
        assert vec.shape == (105,)
        assert not vec.any()

    def test_single_path_string(self):
        vec = string_features(b"C:\\windows", include_histogram=False)
        numstrings, avlength = vec[0], vec[1]
        assert numstrings == 1 and avlength == 10
        assert vec[4] == 1          # "C:\" occurrences

    def test_url_and_registry_counters(self):
        data = b"see http://a.example and https://b.example plus HKEY_LOCAL"
        vec = string_features(data, include_histogram=False)
        assert vec[5] == 1 and vec[6] == 1 and vec[7] == 1

    def test_https_does_not_count_as_http(self):
        vec = string_features(b"https://only.example", include_histogram=False)
        assert vec[5] == 0 and vec[6] == 1

    def test_histogram_normalized(self):
        vec = string_features(b"hello world, hello strings", True)
        assert vec[9:].sum() == pytest.approx(1.0, abs=1e-9)


class TestStripStrings:
    def test_run_removed(self):
        assert strip_string_bytes(b"\x00hello\x00") == b"\x00\x00"

    def test_no_runs_identity(self):
        blob = bytes([1, 2, 3, 200, 9, 1]) * 10
        assert strip_string_bytes(blob) == blob

    def test_all_one_string_empty(self):
        assert strip_string_bytes(b"only printable text here") == b""

    @given(st.binary(max_size=300))
    @settings(max_examples=100)
    def test_length_accounting(self, data):
        stripped = strip_string_bytes(data)
        removed = sum(len(s) for _, s in pe.extract_printable_strings(data, 5))
        assert len(stripped) == len(data) - removed


class TestParsedGroups:
    def test_general_counts(self):
        parsed = pe.parse_pe(minimal_fixture(seed=0, n_sections=1,
                                             with_imports=False))
        fv = extract_features(parsed.raw, VARIANTS["default"], pe=parsed)
        general = fv.values[:8]
        assert general[2] == 1          # sections
        assert general[3] == 0          # imports
        assert general[5] == 0          # overlay flag

    def test_overlay_flag_set(self):
        data = minimal_fixture(seed=1) + b"\xAB" * 64
        fv = extract_features(data, VARIANTS["default"])
        assert fv.values[5] == 1

    def test_three_sections_counted(self):
        parsed = pe.parse_pe(minimal_fixture(seed=2, n_sections=3,
                                             with_imports=False))
        fv = extract_features(parsed.raw, VARIANTS["default"], pe=parsed)
        assert fv.values[2] == 3

    def test_single_import_sets_one_bucket_per_block(self):
        imports = {"kernel32.dll": ["ExitProcess"]}
        vec = import_export_features(imports, [])
        libs, pairs, exports = vec[:256], vec[256:1280], vec[1280:]
        assert np.abs(libs).sum() == 1 and np.abs(pairs).sum() == 1
        assert not exports.any()
        idx, sign = token_bucket("kernel32.dll", 256, SEED_IMPORT_LIBS)
        assert libs[idx] == sign
        idx, sign = token_bucket("kernel32.dll:ExitProcess", 1024,
                                 SEED_IMPORT_PAIRS)
        assert pairs[idx] == sign

    def test_data_directory_slots(self):
        parsed = pe.parse_pe(minimal_fixture(seed=3, debug_dir=True))
        vec = data_directory_features(parsed)
        rva, size = parsed.optional_header.data_directories[6]
        assert vec[12] == rva and vec[13] == size == 0x54

    def test_all_zero_section_entropy(self):
        built = build_pe([SectionSpec(b".z", bytes(512), virtual_size=512)])
        fv = extract_features(built, VARIANTS["v2"])
        # section aggregates follow general(8) + strings(9)
        assert fv.values[17 + 1] == 0.0     # mean entropy
        assert fv.values[17 + 2] == 0.0     # max entropy


class TestExtract:
    def test_dimensions(self):
        data = minimal_fixture(seed=4)
        for name, config in VARIANTS.items():
            fv = extract_features(data, config)
            assert fv.values.shape == (config.dimension,)
            assert np.isfinite(fv.values).all()

    def test_histogram_blocks_sum_to_one(self):
        data = minimal_fixture(seed=5)
        fv = extract_features(data, VARIANTS["default"])
        hist = fv.values[8 + 105: 8 + 105 + 256]
        entropy = fv.values[8 + 105 + 256: 8 + 105 + 512]
        assert hist.sum() == pytest.approx(1.0, abs=1e-9)
        assert entropy.sum() == pytest.approx(1.0, abs=1e-9)

    def test_truncation_invariance_exact(self):
        data = minimal_fixture(seed=6, slack_capacity=2000)
        parsed = pe.parse_pe(data)
        for config in (VARIANTS["v1"], VARIANTS["v2"], VARIANTS["v3"]):
            base = extract_features(data, config).values
            overlayed = apply(append_overlay(b"benign text " * 2000), parsed)
            filled = apply(fill_slack(b"\x66" * 1500), parsed)
            assert np.array_equal(
                base, extract_features(overlayed.raw, config).values)
            assert np.array_equal(
                base, extract_features(filled.raw, config).values)

    def test_default_sees_overlay(self):
        data = minimal_fixture(seed=7)
        parsed = pe.parse_pe(data)
        overlayed = apply(append_overlay(b"benign text " * 2000), parsed)
        base = extract_features(data, VARIANTS["default"]).values
        changed = extract_features(overlayed.raw, VARIANTS["default"]).values
        assert not np.array_equal(base, changed)

    def test_degraded_extraction_on_junk(self):
        junk = b"ZZ" + bytes(4000)
        fv = extract_features(junk, VARIANTS["default"])
        assert fv.values[-1] == 1.0                      # parse-failed flag
        assert fv.values[:8].sum() == 0                  # parsed groups zeroed
        hist = fv.values[8 + 105: 8 + 105 + 256]
        assert hist.sum() == pytest.approx(1.0, abs=1e-9)  # raw-byte groups live

    def test_custom_config_rejects_unknown_group(self):
        with pytest.raises(ValueError):
            VariantConfig("bad", ("general", "header"))

    def test_determinism(self):
        data = minimal_fixture(seed=8)
        a = extract_features(data, VARIANTS["v1"]).values
        b = extract_features(data, VARIANTS["v1"]).values
        assert np.array_equal(a, b)

    def test_fuzzed_inputs_never_nan(self):
        rng = random.Random(9)
        base = bytearray(minimal_fixture(seed=9))
        for _ in range(60):
            mutated = bytearray(base)
            for _ in range(rng.randrange(1, 30)):
                mutated[rng.randrange(len(mutated))] = rng.randrange(256)
            if rng.random() < 0.3:
                mutated = mutated[:rng.randrange(1, len(mutated))]
            fv = extract_features(bytes(mutated), VARIANTS["default"])
            assert np.isfinite(fv.values).all()
