"""Windows PE (Portable Executable) layout model.

A manual :mod:`struct` based parser for PE32 and PE32+ images.  The parsed
:class:`PeFile` is an immutable view over the raw bytes: headers, section
table, per-section slack, and the trailing overlay.  Nothing is executed or
relocated; the model covers exactly what static feature extraction and the
file-modification harness need.

Parsing is deliberately lenient where real-world malware is sloppy: section
raw ranges that run past the end of the file are clamped and recorded as
parse warnings instead of failing.  Structural lies that would make the
layout ambiguous (missing magics, truncated tables, overlapping raw ranges)
raise :class:`MalformedPe` and callers decide policy.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

MZ_MAGIC = b"MZ"
PE_SIGNATURE = b"PE\x00\x00"
PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B

DOS_HEADER_SIZE = 0x40
E_LFANEW_OFFSET = 0x3C
COFF_HEADER_SIZE = 20
SECTION_HEADER_SIZE = 40
NUM_STANDARD_DATA_DIRECTORIES = 16

# Section characteristics bits used by the feature extractors and fixtures.
IMAGE_SCN_CNT_CODE = 0x00000020
IMAGE_SCN_CNT_INITIALIZED_DATA = 0x00000040
IMAGE_SCN_MEM_EXECUTE = 0x20000000
IMAGE_SCN_MEM_READ = 0x40000000
IMAGE_SCN_MEM_WRITE = 0x80000000

# Data directory slot indices (first 15 are exposed as features).
DD_EXPORT = 0
DD_IMPORT = 1
DD_DEBUG = 6

DEFAULT_MIN_STRING_LENGTH = 5

_PRINTABLE_RE_CACHE: Dict[int, "re.Pattern[bytes]"] = {}


class MalformedPe(ValueError):
    """Input is not a well-formed PE within the supported subset."""


class LayoutConflict(ValueError):
    """A mutated layout cannot be serialized into a coherent file."""


@dataclass(frozen=True)
class DosHeader:
    magic: bytes
    e_lfanew: int


@dataclass(frozen=True)
class CoffHeader:
    machine: int
    number_of_sections: int
    timestamp: int
    size_of_optional_header: int
    characteristics: int


@dataclass(frozen=True)
class OptionalHeader:
    magic: int                      # PE32_MAGIC or PE32PLUS_MAGIC
    entry_point: int
    image_base: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int
    checksum: int
    data_directories: Tuple[Tuple[int, int], ...]   # (rva, size) per slot

    @property
    def is_pe32plus(self) -> bool:
        return self.magic == PE32PLUS_MAGIC


@dataclass(frozen=True)
class SectionHeader:
    name: bytes                     # raw 8 bytes
    virtual_size: int
    virtual_address: int
    size_of_raw_data: int
    pointer_to_raw_data: int
    characteristics: int

    @property
    def name_str(self) -> str:
        return self.name.rstrip(b"\x00").decode("latin-1")

    @property
    def is_executable(self) -> bool:
        return bool(self.characteristics & IMAGE_SCN_MEM_EXECUTE)

    @property
    def is_writable(self) -> bool:
        return bool(self.characteristics & IMAGE_SCN_MEM_WRITE)


@dataclass(frozen=True)
class SlackRegion:
    section_index: int
    offset: int
    length: int


@dataclass(frozen=True)
class PeFile:
    raw: bytes
    dos_header: DosHeader
    coff_header: CoffHeader
    optional_header: OptionalHeader
    sections: Tuple[SectionHeader, ...]
    overlay_offset: int
    warnings: Tuple[str, ...] = field(default=())

    def section_raw_range(self, index: int) -> Tuple[int, int]:
        """Effective (clamped) raw-file range of a section."""
        sec = self.sections[index]
        start = min(sec.pointer_to_raw_data, len(self.raw))
        end = min(sec.pointer_to_raw_data + sec.size_of_raw_data, len(self.raw))
        if sec.size_of_raw_data == 0:
            return start, start
        return start, max(start, end)

    def section_data(self, index: int) -> bytes:
        start, end = self.section_raw_range(index)
        return self.raw[start:end]

    def structure(self) -> tuple:
        """Structural identity, ignoring raw bytes (for round-trip checks)."""
        return (self.dos_header, self.coff_header, self.optional_header,
                self.sections, self.overlay_offset)


def _u16(data: bytes, off: int) -> int:
    return struct.unpack_from("<H", data, off)[0]


def _u32(data: bytes, off: int) -> int:
    return struct.unpack_from("<I", data, off)[0]


def _u64(data: bytes, off: int) -> int:
    return struct.unpack_from("<Q", data, off)[0]


def optional_header_offset(e_lfanew: int) -> int:
    return e_lfanew + 4 + COFF_HEADER_SIZE


def section_table_offset(e_lfanew: int, size_of_optional_header: int) -> int:
    return optional_header_offset(e_lfanew) + size_of_optional_header


def data_directory_offset(e_lfanew: int, pe32plus: bool) -> int:
    return optional_header_offset(e_lfanew) + (112 if pe32plus else 96)


def parse_pe(data: bytes) -> PeFile:
    """Parse a PE32/PE32+ image into a :class:`PeFile`.

    Raises :class:`MalformedPe` when the input lacks the MZ/PE magics, the
    header chain points out of bounds, the section table is truncated, or
    section raw ranges overlap.  Section ranges past end-of-file are clamped
    with a warning instead (fail-open: malware is frequently malformed).
    """
    if not data:
        raise MalformedPe("empty input")
    if data[:2] != MZ_MAGIC:
        raise MalformedPe("missing MZ magic")
    if len(data) < DOS_HEADER_SIZE:
        raise MalformedPe("DOS header truncated")
    e_lfanew = _u32(data, E_LFANEW_OFFSET)
    if e_lfanew + 4 > len(data) or data[e_lfanew:e_lfanew + 4] != PE_SIGNATURE:
        raise MalformedPe("PE signature not found at e_lfanew")
    coff_off = e_lfanew + 4
    if coff_off + COFF_HEADER_SIZE > len(data):
        raise MalformedPe("COFF header truncated")
    machine = _u16(data, coff_off)
    num_sections = _u16(data, coff_off + 2)
    timestamp = _u32(data, coff_off + 4)
    opt_size = _u16(data, coff_off + 16)
    characteristics = _u16(data, coff_off + 18)

    opt_off = coff_off + COFF_HEADER_SIZE
    if opt_off + 2 > len(data):
        raise MalformedPe("optional header truncated")
    magic = _u16(data, opt_off)
    if magic not in (PE32_MAGIC, PE32PLUS_MAGIC):
        raise MalformedPe(f"unsupported optional header magic 0x{magic:x}")
    pe32plus = magic == PE32PLUS_MAGIC
    fixed_size = 112 if pe32plus else 96
    if opt_off + fixed_size > len(data):
        raise MalformedPe("optional header truncated")

    warnings: List[str] = []
    entry_point = _u32(data, opt_off + 16)
    image_base = _u64(data, opt_off + 24) if pe32plus else _u32(data, opt_off + 28)
    section_alignment = _u32(data, opt_off + 32)
    file_alignment = _u32(data, opt_off + 36)
    size_of_image = _u32(data, opt_off + 56)
    size_of_headers = _u32(data, opt_off + 60)
    checksum = _u32(data, opt_off + 64)
    num_dirs = _u32(data, opt_off + (108 if pe32plus else 92))
    dir_off = opt_off + fixed_size
    if num_dirs > NUM_STANDARD_DATA_DIRECTORIES:
        warnings.append(f"data directory count {num_dirs} clamped to 16")
        num_dirs = NUM_STANDARD_DATA_DIRECTORIES
    max_dirs_fitting = max(0, min(num_dirs,
                                  (opt_off + opt_size - dir_off) // 8,
                                  (len(data) - dir_off) // 8))
    if max_dirs_fitting < num_dirs:
        warnings.append("data directories truncated by optional header size")
    directories = tuple(
        (_u32(data, dir_off + 8 * i), _u32(data, dir_off + 8 * i + 4))
        for i in range(max_dirs_fitting)
    )

    table_off = opt_off + opt_size
    table_end = table_off + num_sections * SECTION_HEADER_SIZE
    if table_end > len(data):
        raise MalformedPe("section count inconsistent with file size")

    sections: List[SectionHeader] = []
    for i in range(num_sections):
        off = table_off + i * SECTION_HEADER_SIZE
        sections.append(SectionHeader(
            name=data[off:off + 8],
            virtual_size=_u32(data, off + 8),
            virtual_address=_u32(data, off + 12),
            size_of_raw_data=_u32(data, off + 16),
            pointer_to_raw_data=_u32(data, off + 20),
            characteristics=_u32(data, off + 36),
        ))
        declared_end = sections[-1].pointer_to_raw_data + sections[-1].size_of_raw_data
        if sections[-1].size_of_raw_data > 0 and declared_end > len(data):
            warnings.append(f"section {i} raw range clamped to end of file")

    _check_overlap(sections, len(data))

    header_limit = min(size_of_headers, len(data)) if size_of_headers else table_end
    ends = [min(s.pointer_to_raw_data + s.size_of_raw_data, len(data))
            for s in sections if s.size_of_raw_data > 0]
    overlay_offset = min(len(data), max(ends, default=header_limit))

    return PeFile(
        raw=bytes(data),
        dos_header=DosHeader(magic=data[:2], e_lfanew=e_lfanew),
        coff_header=CoffHeader(machine=machine, number_of_sections=num_sections,
                               timestamp=timestamp, size_of_optional_header=opt_size,
                               characteristics=characteristics),
        optional_header=OptionalHeader(
            magic=magic, entry_point=entry_point, image_base=image_base,
            section_alignment=section_alignment, file_alignment=file_alignment,
            size_of_image=size_of_image, size_of_headers=size_of_headers,
            checksum=checksum, data_directories=directories),
        sections=tuple(sections),
        overlay_offset=overlay_offset,
        warnings=tuple(warnings),
    )


def _check_overlap(sections: List[SectionHeader], file_len: int) -> None:
    ranges = []
    for sec in sections:
        if sec.size_of_raw_data == 0:
            continue
        start = min(sec.pointer_to_raw_data, file_len)
        end = min(sec.pointer_to_raw_data + sec.size_of_raw_data, file_len)
        if end > start:
            ranges.append((start, end))
    ranges.sort()
    for (s0, e0), (s1, _e1) in zip(ranges, ranges[1:]):
        if s1 < e0:
            raise MalformedPe("overlapping section raw ranges")


def slack_regions(pe: PeFile) -> List[SlackRegion]:
    """Per-section on-disk padding past the virtual size, sorted by offset."""
    regions = []
    for i, sec in enumerate(pe.sections):
        start, end = pe.section_raw_range(i)
        raw_len = end - start
        if raw_len > sec.virtual_size:
            regions.append(SlackRegion(
                section_index=i,
                offset=start + sec.virtual_size,
                length=raw_len - sec.virtual_size,
            ))
    regions.sort(key=lambda r: r.offset)
    return regions


def overlay(pe: PeFile) -> Tuple[int, int]:
    """``(start, stop)`` byte range of the overlay; empty range allowed."""
    return pe.overlay_offset, len(pe.raw)


def overlay_data(pe: PeFile) -> bytes:
    start, stop = overlay(pe)
    return pe.raw[start:stop]


def truncate_to_virtual_size(pe: PeFile) -> bytes:
    """Drop slack and overlay, keeping headers plus each section's mapped prefix.

    The emitted section table is rewritten to the compacted layout (raw
    pointers shifted, raw sizes capped at the virtual size) so the output is
    itself a coherent PE and the operation is idempotent.
    """
    raw = pe.raw
    order = sorted(
        (i for i in range(len(pe.sections))
         if pe.section_raw_range(i)[1] > pe.section_raw_range(i)[0]),
        key=lambda i: pe.sections[i].pointer_to_raw_data,
    )
    first_ptr = (pe.section_raw_range(order[0])[0] if order else len(raw))

    out = bytearray(raw[:first_ptr])
    new_layout = {}
    for i in order:
        start, end = pe.section_raw_range(i)
        keep = min(end - start, pe.sections[i].virtual_size)
        new_layout[i] = (len(out), keep)
        out += raw[start:start + keep]

    table_off = section_table_offset(pe.dos_header.e_lfanew,
                                     pe.coff_header.size_of_optional_header)
    table_end = table_off + len(pe.sections) * SECTION_HEADER_SIZE
    if table_end <= first_ptr:
        for i, (new_ptr, new_size) in new_layout.items():
            off = table_off + i * SECTION_HEADER_SIZE
            struct.pack_into("<I", out, off + 16, new_size)
            struct.pack_into("<I", out, off + 20, new_ptr)
    return bytes(out)


def _printable_re(min_len: int) -> "re.Pattern[bytes]":
    pat = _PRINTABLE_RE_CACHE.get(min_len)
    if pat is None:
        pat = re.compile(b"[\x20-\x7e]{%d,}" % min_len)
        _PRINTABLE_RE_CACHE[min_len] = pat
    return pat


def extract_printable_strings(data: bytes,
                              min_len: int = DEFAULT_MIN_STRING_LENGTH
                              ) -> List[Tuple[int, str]]:
    """Maximal printable-ASCII runs of at least ``min_len``, with offsets."""
    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    return [(m.start(), m.group().decode("ascii"))
            for m in _printable_re(min_len).finditer(data)]


def serialize_pe(pe: PeFile) -> bytes:
    """Re-emit the file, patching the modeled header fields into the raw image.

    For an unmodified parse the output equals the input byte-for-byte.  A
    model whose sections were mutated into overlapping raw ranges (or whose
    header chain no longer fits the image) raises :class:`LayoutConflict`.
    """
    raw = pe.raw
    e_lfanew = pe.dos_header.e_lfanew
    if pe.dos_header.magic != MZ_MAGIC:
        raise LayoutConflict("DOS magic must be MZ")
    coff_off = e_lfanew + 4
    opt_off = coff_off + COFF_HEADER_SIZE
    table_off = opt_off + pe.coff_header.size_of_optional_header
    table_end = table_off + len(pe.sections) * SECTION_HEADER_SIZE
    if e_lfanew + 4 > len(raw) or table_end > len(raw):
        raise LayoutConflict("header chain exceeds image size")
    if pe.coff_header.number_of_sections != len(pe.sections):
        raise LayoutConflict("section count does not match section table")
    try:
        _check_overlap(list(pe.sections), len(raw))
    except MalformedPe as exc:
        raise LayoutConflict(str(exc)) from exc

    buf = bytearray(raw)
    struct.pack_into("<I", buf, E_LFANEW_OFFSET, e_lfanew)
    struct.pack_into("<HHI", buf, coff_off,
                     pe.coff_header.machine,
                     pe.coff_header.number_of_sections,
                     pe.coff_header.timestamp)
    struct.pack_into("<HH", buf, coff_off + 16,
                     pe.coff_header.size_of_optional_header,
                     pe.coff_header.characteristics)

    opt = pe.optional_header
    struct.pack_into("<H", buf, opt_off, opt.magic)
    struct.pack_into("<I", buf, opt_off + 16, opt.entry_point)
    if opt.is_pe32plus:
        struct.pack_into("<Q", buf, opt_off + 24, opt.image_base)
    else:
        struct.pack_into("<I", buf, opt_off + 28, opt.image_base)
    struct.pack_into("<II", buf, opt_off + 32,
                     opt.section_alignment, opt.file_alignment)
    struct.pack_into("<III", buf, opt_off + 56,
                     opt.size_of_image, opt.size_of_headers, opt.checksum)
    dir_off = data_directory_offset(e_lfanew, opt.is_pe32plus)
    for i, (rva, size) in enumerate(opt.data_directories):
        struct.pack_into("<II", buf, dir_off + 8 * i, rva, size)

    for i, sec in enumerate(pe.sections):
        off = table_off + i * SECTION_HEADER_SIZE
        buf[off:off + 8] = sec.name[:8].ljust(8, b"\x00")
        struct.pack_into("<IIII", buf, off + 8,
                         sec.virtual_size, sec.virtual_address,
                         sec.size_of_raw_data, sec.pointer_to_raw_data)
        struct.pack_into("<I", buf, off + 36, sec.characteristics)
    return bytes(buf)


def rva_to_offset(pe: PeFile, rva: int, length: int = 1) -> Optional[int]:
    """Map an RVA to a file offset, or None when unmapped/out of range."""
    if rva < 0 or length < 0:
        return None
    header_limit = min(pe.optional_header.size_of_headers, len(pe.raw))
    if rva + length <= header_limit:
        return rva
    for i, sec in enumerate(pe.sections):
        start, end = pe.section_raw_range(i)
        span = end - start
        if sec.virtual_address <= rva < sec.virtual_address + max(sec.virtual_size, span):
            off = start + (rva - sec.virtual_address)
            if off + length <= end:
                return off
            return None
    return None


def _read_cstring(pe: PeFile, rva: int, max_len: int = 256) -> Optional[str]:
    off = rva_to_offset(pe, rva, 1)
    if off is None:
        return None
    end = pe.raw.find(b"\x00", off, off + max_len)
    if end < 0:
        end = min(off + max_len, len(pe.raw))
    try:
        return pe.raw[off:end].decode("ascii")
    except UnicodeDecodeError:
        return pe.raw[off:end].decode("latin-1")


_MAX_IMPORT_DESCRIPTORS = 1024
_MAX_THUNKS = 65536
_MAX_EXPORT_NAMES = 65536


def parse_imports(pe: PeFile) -> Tuple[Dict[str, List[str]], List[str]]:
    """Imported ``{library: [function, ...]}`` plus parse warnings.

    Best-effort: a malformed import directory yields whatever parsed cleanly
    and a warning, never an exception.
    """
    imports: Dict[str, List[str]] = {}
    warnings: List[str] = []
    dirs = pe.optional_header.data_directories
    if len(dirs) <= DD_IMPORT or dirs[DD_IMPORT][0] == 0:
        return imports, warnings
    desc_rva = dirs[DD_IMPORT][0]
    thunk_size = 8 if pe.optional_header.is_pe32plus else 4
    ordinal_flag = 1 << (thunk_size * 8 - 1)
    for i in range(_MAX_IMPORT_DESCRIPTORS):
        off = rva_to_offset(pe, desc_rva + i * 20, 20)
        if off is None:
            warnings.append("import descriptor table out of mapped range")
            break
        orig_thunk, _, _, name_rva, first_thunk = struct.unpack_from("<IIIII", pe.raw, off)
        if orig_thunk == 0 and name_rva == 0 and first_thunk == 0:
            break
        lib = _read_cstring(pe, name_rva) if name_rva else None
        if not lib:
            warnings.append("import descriptor with unreadable library name")
            continue
        funcs = imports.setdefault(lib, [])
        thunk_rva = orig_thunk or first_thunk
        for j in range(_MAX_THUNKS):
            toff = rva_to_offset(pe, thunk_rva + j * thunk_size, thunk_size)
            if toff is None:
                warnings.append(f"import thunks for {lib} out of mapped range")
                break
            entry = (_u64(pe.raw, toff) if thunk_size == 8 else _u32(pe.raw, toff))
            if entry == 0:
                break
            if entry & ordinal_flag:
                funcs.append(f"ordinal{entry & 0xFFFF}")
                continue
            name = _read_cstring(pe, (entry & (ordinal_flag - 1)) + 2)
            if name is None:
                warnings.append(f"import name for {lib} out of mapped range")
                break
            funcs.append(name)
    return imports, warnings


def parse_exports(pe: PeFile) -> Tuple[List[str], List[str]]:
    """Exported function names plus parse warnings (best-effort)."""
    names: List[str] = []
    warnings: List[str] = []
    dirs = pe.optional_header.data_directories
    if len(dirs) <= DD_EXPORT or dirs[DD_EXPORT][0] == 0:
        return names, warnings
    off = rva_to_offset(pe, dirs[DD_EXPORT][0], 40)
    if off is None:
        warnings.append("export directory out of mapped range")
        return names, warnings
    n_names = _u32(pe.raw, off + 24)
    names_rva = _u32(pe.raw, off + 32)
    if n_names > _MAX_EXPORT_NAMES:
        warnings.append("export name count clamped")
        n_names = _MAX_EXPORT_NAMES
    for i in range(n_names):
        noff = rva_to_offset(pe, names_rva + 4 * i, 4)
        if noff is None:
            warnings.append("export name pointer table out of mapped range")
            break
        name = _read_cstring(pe, _u32(pe.raw, noff))
        if name is None:
            warnings.append("export name out of mapped range")
            break
        names.append(name)
    return names, warnings
