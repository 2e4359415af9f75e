from __future__ import annotations

import dataclasses
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import string_scan_ref
from pedefense import pe
from pedefense.fixtures import (
    CODE_CHARACTERISTICS,
    SectionSpec,
    build_pe,
    fixture_corpus,
    minimal_fixture,
)


def no_slack_fixture(seed: int = 0, overlay: bytes = b"") -> bytes:
    """Sections whose virtual size equals the aligned raw size: zero slack."""
    import random
    rng = random.Random(seed)
    sections = []
    for name in (b".text", b".data"):
        data = bytes(rng.randrange(256) for _ in range(rng.randrange(600, 1400)))
        padded = len(data) + (-len(data)) % 0x200
        sections.append(SectionSpec(name, data, virtual_size=padded,
                                    characteristics=CODE_CHARACTERISTICS
                                    if name == b".text" else 0x40000040))
    return build_pe(sections, overlay=overlay)


class TestParse:
    def test_minimal_fixture_layout(self):
        parsed = pe.parse_pe(minimal_fixture(seed=0, n_sections=1,
                                             with_imports=False))
        assert parsed.dos_header.magic == b"MZ"
        assert parsed.dos_header.e_lfanew == 0x80
        assert len(parsed.sections) == 1
        assert parsed.overlay_offset == len(parsed.raw)

    def test_no_mz_magic(self):
        with pytest.raises(pe.MalformedPe):
            pe.parse_pe(b"ZZ" + bytes(200))

    def test_empty_input(self):
        with pytest.raises(pe.MalformedPe):
            pe.parse_pe(b"")

    def test_bad_e_lfanew(self):
        data = bytearray(minimal_fixture(seed=0))
        struct.pack_into("<I", data, 0x3C, len(data) + 100)
        with pytest.raises(pe.MalformedPe):
            pe.parse_pe(bytes(data))

    def test_section_count_inconsistent(self):
        data = bytearray(minimal_fixture(seed=0))
        parsed = pe.parse_pe(bytes(data))
        struct.pack_into("<H", data, parsed.dos_header.e_lfanew + 4 + 2, 4000)
        with pytest.raises(pe.MalformedPe):
            pe.parse_pe(bytes(data))

    def test_overlapping_sections_rejected(self):
        data = bytearray(minimal_fixture(seed=2, n_sections=3))
        parsed = pe.parse_pe(bytes(data))
        table = pe.section_table_offset(parsed.dos_header.e_lfanew,
                                        parsed.coff_header.size_of_optional_header)
        # point section 1's raw range into section 0's
        struct.pack_into("<I", data, table + 40 + 20,
                         parsed.sections[0].pointer_to_raw_data + 16)
        with pytest.raises(pe.MalformedPe):
            pe.parse_pe(bytes(data))

    def test_raw_range_past_eof_clamped_with_warning(self):
        base = minimal_fixture(seed=3, n_sections=2)
        parsed = pe.parse_pe(base)
        start, _ = parsed.section_raw_range(len(parsed.sections) - 1)
        truncated = pe.parse_pe(base[:start + 64])
        assert any("clamped" in w for w in truncated.warnings)
        assert truncated.section_raw_range(len(truncated.sections) - 1)[1] \
            == start + 64

    def test_appended_bytes_become_overlay(self):
        base = minimal_fixture(seed=4)
        longer = pe.parse_pe(base + b"\xAA" * 100)
        assert longer.overlay_offset == len(base)
        assert pe.overlay_data(longer) == b"\xAA" * 100


class TestSlackAndOverlay:
    def test_slack_region_size(self):
        data = build_pe([SectionSpec(b".a", b"\x01" * 10, virtual_size=10,
                                     extra_raw=502 - (512 - 10))])
        parsed = pe.parse_pe(data)
        regions = pe.slack_regions(parsed)
        assert len(regions) == 1
        assert regions[0].length == 502

    def test_no_slack_when_equal(self):
        data = build_pe([SectionSpec(b".a", b"\x01" * 512, virtual_size=512)])
        assert pe.slack_regions(pe.parse_pe(data)) == []

    def test_no_slack_when_virtual_larger(self):
        data = build_pe([SectionSpec(b".a", b"\x01" * 512, virtual_size=600)])
        assert pe.slack_regions(pe.parse_pe(data)) == []

    def test_overlay_empty_and_nonempty(self):
        base = no_slack_fixture(seed=1)
        parsed = pe.parse_pe(base)
        start, stop = pe.overlay(parsed)
        assert start == stop == len(base)
        with_overlay = pe.parse_pe(base + bytes(2048))
        start, stop = pe.overlay(with_overlay)
        assert stop - start == 2048


class TestTruncate:
    def test_overlay_removed_exactly(self):
        base = no_slack_fixture(seed=2)
        with_overlay = pe.parse_pe(base + b"\x55" * (1 << 20))
        assert pe.truncate_to_virtual_size(with_overlay) == base

    def test_slack_removed(self):
        data = build_pe([SectionSpec(b".a", b"\x07" * 10, virtual_size=10)])
        parsed = pe.parse_pe(data)
        slack = pe.slack_regions(parsed)[0]
        out = pe.truncate_to_virtual_size(parsed)
        assert len(out) == len(data) - slack.length

    def test_identity_without_slack_or_overlay(self):
        base = no_slack_fixture(seed=3)
        assert pe.truncate_to_virtual_size(pe.parse_pe(base)) == base

    def test_idempotent(self, fixture_corpus):
        for data in fixture_corpus[:20]:
            once = pe.truncate_to_virtual_size(pe.parse_pe(data))
            twice = pe.truncate_to_virtual_size(pe.parse_pe(once))
            assert twice == once

    def test_partition_covers_file(self):
        """Truncated content, slack, and overlay tile a contiguous fixture."""
        data = minimal_fixture(seed=5, n_sections=3, overlay_size=777)
        parsed = pe.parse_pe(data)
        truncated_len = len(pe.truncate_to_virtual_size(parsed))
        slack_len = sum(r.length for r in pe.slack_regions(parsed))
        overlay_len = len(data) - parsed.overlay_offset
        assert truncated_len + slack_len + overlay_len == len(data)


class TestStrings:
    def test_simple_run(self):
        assert pe.extract_printable_strings(b"\x00\x00hello\x00", 5) \
            == [(2, "hello")]

    def test_too_short(self):
        assert pe.extract_printable_strings(b"hi\x00", 5) == []

    def test_two_runs(self):
        assert pe.extract_printable_strings(b"abcde\x01fghij", 5) \
            == [(0, "abcde"), (6, "fghij")]

    @given(st.binary(max_size=400), st.integers(min_value=1, max_value=8))
    @settings(max_examples=150)
    def test_matches_state_machine_oracle(self, data, min_len):
        assert pe.extract_printable_strings(data, min_len) \
            == string_scan_ref(data, min_len)


class TestSerialize:
    def test_round_trip_corpus(self, fixture_corpus):
        for data in fixture_corpus:
            assert pe.serialize_pe(pe.parse_pe(data)) == data

    def test_round_trip_with_overlay(self):
        data = minimal_fixture(seed=6) + b"\x99" * 4096
        assert pe.serialize_pe(pe.parse_pe(data)) == data

    def test_mutated_overlap_raises(self):
        parsed = pe.parse_pe(minimal_fixture(seed=7, n_sections=2))
        bad = list(parsed.sections)
        bad[1] = dataclasses.replace(
            bad[1], pointer_to_raw_data=bad[0].pointer_to_raw_data + 8)
        with pytest.raises(pe.LayoutConflict):
            pe.serialize_pe(dataclasses.replace(parsed, sections=tuple(bad)))

    def test_field_patch_round_trips(self):
        parsed = pe.parse_pe(minimal_fixture(seed=8))
        patched = dataclasses.replace(
            parsed, coff_header=dataclasses.replace(parsed.coff_header,
                                                    timestamp=0x11223344))
        reparsed = pe.parse_pe(pe.serialize_pe(patched))
        assert reparsed.coff_header.timestamp == 0x11223344
        assert reparsed.sections == parsed.sections


class TestImportsExports:
    def test_fixture_imports_parse_back(self):
        parsed = pe.parse_pe(minimal_fixture(seed=9, with_imports=True))
        imports, warnings = pe.parse_imports(parsed)
        assert warnings == []
        assert imports == {
            "kernel32.dll": ["ExitProcess", "CreateFileW", "ReadFile"],
            "user32.dll": ["MessageBoxW"],
        }

    def test_fixture_exports_parse_back(self):
        parsed = pe.parse_pe(minimal_fixture(seed=10, with_exports=True))
        exports, warnings = pe.parse_exports(parsed)
        assert warnings == []
        assert exports == ["InitHelper", "RunHelper"]

    def test_missing_directories_empty(self):
        parsed = pe.parse_pe(minimal_fixture(seed=11, with_imports=False))
        assert pe.parse_imports(parsed)[0] == {}
        assert pe.parse_exports(parsed)[0] == []

    def test_corrupt_import_rva_warns(self):
        data = minimal_fixture(seed=12, with_imports=True)
        parsed = pe.parse_pe(data)
        dirs = list(parsed.optional_header.data_directories)
        dirs[pe.DD_IMPORT] = (0x00FFFFFF, dirs[pe.DD_IMPORT][1])
        broken = dataclasses.replace(
            parsed, optional_header=dataclasses.replace(
                parsed.optional_header, data_directories=tuple(dirs)))
        reparsed = pe.parse_pe(pe.serialize_pe(broken))
        imports, warnings = pe.parse_imports(reparsed)
        assert imports == {}
        assert warnings


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=40, deadline=None)
def test_round_trip_property_over_seeds(seed):
    data = minimal_fixture(seed=seed, pe32plus=seed % 2 == 0,
                           n_sections=1 + seed % 4,
                           overlay_size=seed % 300,
                           slack_capacity=(seed % 3) * 400)
    assert pe.serialize_pe(pe.parse_pe(data)) == data
