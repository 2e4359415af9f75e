"""Deterministic PE fixture generator.

Builds minimal but well-formed PE32/PE32+ images field by field, for tests,
the synthetic desk corpus, and the red-team harness.  Layout is fixed and
documented: 0x40-byte DOS header, stub, PE signature at ``e_lfanew=0x80``,
COFF + optional header, section table with reserved spare slots, then
0x200-aligned section raw data and an optional overlay.

Import and export tables are emitted as dedicated ``.idata``/``.edata``
sections wired through the data directory, so the parser-side directory
walkers have something real to chew on.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .pe import (
    IMAGE_SCN_CNT_CODE,
    IMAGE_SCN_CNT_INITIALIZED_DATA,
    IMAGE_SCN_MEM_EXECUTE,
    IMAGE_SCN_MEM_READ,
    IMAGE_SCN_MEM_WRITE,
    PE32_MAGIC,
    PE32PLUS_MAGIC,
)

MACHINE_I386 = 0x14C
MACHINE_AMD64 = 0x8664

_DOS_STUB_CODE = bytes.fromhex("0e1fba0e00b409cd21b8014ccd21")
_DOS_STUB_MSG = b"This program cannot be run in DOS mode.\r\r\n$"

DEFAULT_FILE_ALIGNMENT = 0x200
DEFAULT_SECTION_ALIGNMENT = 0x1000
E_LFANEW = 0x80
HEADER_RESERVE_SLOTS = 2      # spare section-table slots for the harness

DATA_CHARACTERISTICS = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ
CODE_CHARACTERISTICS = IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ


def align_up(value: int, alignment: int) -> int:
    if alignment <= 0:
        return value
    return (value + alignment - 1) // alignment * alignment


@dataclass
class SectionSpec:
    """One section to emit: raw content plus optional explicit sizing.

    ``virtual_size`` defaults to ``len(data)``, which leaves the alignment
    padding as zero-filled slack.  ``extra_raw`` inflates the raw size past
    the alignment, producing a large deliberate slack region.
    """
    name: bytes
    data: bytes = b""
    virtual_size: Optional[int] = None
    characteristics: int = DATA_CHARACTERISTICS
    extra_raw: int = 0


@dataclass
class _Layout:
    specs: List[SectionSpec] = field(default_factory=list)
    vas: List[int] = field(default_factory=list)


def _build_import_blob(imports: Dict[str, Sequence[str]], va: int,
                       pe32plus: bool) -> Tuple[bytes, Tuple[int, int]]:
    thunk = 8 if pe32plus else 4
    libs = list(imports.items())
    desc_size = (len(libs) + 1) * 20
    pos = desc_size

    ilt_off, iat_off, hint_off, name_off = {}, {}, {}, {}
    hint_blobs: Dict[Tuple[str, str], int] = {}
    blob_parts: List[bytes] = []

    for lib, funcs in libs:
        ilt_off[lib] = pos
        pos += (len(funcs) + 1) * thunk
    for lib, funcs in libs:
        iat_off[lib] = pos
        pos += (len(funcs) + 1) * thunk
    for lib, funcs in libs:
        for fn in funcs:
            key = (lib, fn)
            entry = struct.pack("<H", 0) + fn.encode("ascii") + b"\x00"
            if len(entry) % 2:
                entry += b"\x00"
            hint_blobs[key] = pos
            blob_parts.append(entry)
            pos += len(entry)
    for lib, _funcs in libs:
        name_off[lib] = pos
        blob_parts.append(lib.encode("ascii") + b"\x00")
        pos += len(lib) + 1

    out = bytearray()
    for lib, funcs in libs:
        out += struct.pack("<IIIII", va + ilt_off[lib], 0, 0,
                           va + name_off[lib], va + iat_off[lib])
    out += b"\x00" * 20
    fmt = "<Q" if pe32plus else "<I"
    for table in (ilt_off, iat_off):
        for lib, funcs in libs:
            assert len(out) == table[lib]
            for fn in funcs:
                out += struct.pack(fmt, va + hint_blobs[(lib, fn)])
            out += struct.pack(fmt, 0)
    for part in blob_parts:
        out += part
    return bytes(out), (va, desc_size)


def _build_export_blob(exports: Sequence[str], va: int, dll_name: str,
                       timestamp: int) -> Tuple[bytes, Tuple[int, int]]:
    n = len(exports)
    off_funcs = 40
    off_names = off_funcs + 4 * n
    off_ords = off_names + 4 * n
    off_strings = off_ords + 2 * n

    name_rvas = []
    strings = bytearray()
    for fn in exports:
        name_rvas.append(va + off_strings + len(strings))
        strings += fn.encode("ascii") + b"\x00"
    dll_rva = va + off_strings + len(strings)
    strings += dll_name.encode("ascii") + b"\x00"

    out = bytearray()
    out += struct.pack("<IIHHIIIIIII", 0, timestamp, 0, 0, dll_rva, 1,
                       n, n, va + off_funcs, va + off_names, va + off_ords)
    for i in range(n):
        out += struct.pack("<I", va + 8 * i)          # fake code RVAs
    for rva in name_rvas:
        out += struct.pack("<I", rva)
    for i in range(n):
        out += struct.pack("<H", i)
    out += strings
    return bytes(out), (va, len(out))


def build_pe(sections: Sequence[SectionSpec], *,
             imports: Optional[Dict[str, Sequence[str]]] = None,
             exports: Optional[Sequence[str]] = None,
             overlay: bytes = b"",
             pe32plus: bool = False,
             timestamp: int = 0x60000000,
             checksum: int = 0,
             debug_dir: bool = False,
             file_alignment: int = DEFAULT_FILE_ALIGNMENT,
             section_alignment: int = DEFAULT_SECTION_ALIGNMENT,
             header_reserve: int = HEADER_RESERVE_SLOTS,
             dll_name: str = "fixture.dll") -> bytes:
    """Assemble a complete PE image and return its bytes."""
    specs = list(sections)
    layout = _Layout()

    opt_size = 0xF0 if pe32plus else 0xE0
    table_off = E_LFANEW + 4 + 20 + opt_size

    gen_count = (1 if imports else 0) + (1 if exports else 0) + (1 if debug_dir else 0)
    n_sections = len(specs) + gen_count
    size_of_headers = align_up(
        table_off + (n_sections + header_reserve) * 40, file_alignment)

    # First pass: assign virtual addresses (generated sections included).
    va = section_alignment
    planned: List[Tuple[SectionSpec, int]] = []
    for spec in specs:
        planned.append((spec, va))
        vsize = spec.virtual_size if spec.virtual_size is not None else len(spec.data)
        va = align_up(va + max(vsize, 1), section_alignment)

    data_dirs = [(0, 0)] * 16
    if imports:
        blob, entry = _build_import_blob(imports, va, pe32plus)
        spec = SectionSpec(name=b".idata", data=blob)
        planned.append((spec, va))
        data_dirs[1] = entry
        va = align_up(va + max(len(blob), 1), section_alignment)
    if exports:
        blob, entry = _build_export_blob(exports, va, dll_name, timestamp)
        spec = SectionSpec(name=b".edata", data=blob)
        planned.append((spec, va))
        data_dirs[0] = entry
        va = align_up(va + max(len(blob), 1), section_alignment)
    if debug_dir:
        blob = b"\x00" * 0x54
        spec = SectionSpec(name=b".debug", data=blob)
        planned.append((spec, va))
        data_dirs[6] = (va, 0x54)
        va = align_up(va + len(blob), section_alignment)

    # Second pass: raw layout.
    ptr = size_of_headers
    rows = []
    for spec, sec_va in planned:
        vsize = spec.virtual_size if spec.virtual_size is not None else len(spec.data)
        raw_size = align_up(len(spec.data) + spec.extra_raw, file_alignment)
        sec_ptr = ptr if raw_size > 0 else 0
        rows.append((spec, sec_va, vsize, raw_size, sec_ptr))
        ptr += raw_size

    size_of_image = align_up(va, section_alignment)
    entry_va = 0
    for spec, sec_va, _v, _r, _p in rows:
        if spec.characteristics & IMAGE_SCN_MEM_EXECUTE:
            entry_va = sec_va
            break
    if entry_va == 0 and rows:
        entry_va = rows[0][1]

    buf = bytearray(size_of_headers)
    buf[0:2] = b"MZ"
    struct.pack_into("<H", buf, 2, 0x90)
    struct.pack_into("<H", buf, 4, 3)
    struct.pack_into("<I", buf, 0x3C, E_LFANEW)
    stub = _DOS_STUB_CODE + _DOS_STUB_MSG
    buf[0x40:0x40 + len(stub)] = stub

    buf[E_LFANEW:E_LFANEW + 4] = b"PE\x00\x00"
    machine = MACHINE_AMD64 if pe32plus else MACHINE_I386
    characteristics = 0x0022 if pe32plus else 0x0102
    struct.pack_into("<HHIIIHH", buf, E_LFANEW + 4,
                     machine, len(rows), timestamp, 0, 0, opt_size, characteristics)

    opt = E_LFANEW + 4 + 20
    magic = PE32PLUS_MAGIC if pe32plus else PE32_MAGIC
    size_of_code = sum(r[3] for r in rows if r[0].characteristics & IMAGE_SCN_CNT_CODE)
    size_of_init = sum(r[3] for r in rows
                       if r[0].characteristics & IMAGE_SCN_CNT_INITIALIZED_DATA)
    struct.pack_into("<HBB", buf, opt, magic, 14, 0)
    struct.pack_into("<III", buf, opt + 4, size_of_code, size_of_init, 0)
    struct.pack_into("<II", buf, opt + 16, entry_va, section_alignment)
    if pe32plus:
        struct.pack_into("<Q", buf, opt + 24, 0x140000000)
    else:
        struct.pack_into("<II", buf, opt + 24, 0, 0x400000)
    struct.pack_into("<II", buf, opt + 32, section_alignment, file_alignment)
    struct.pack_into("<HHHHHH", buf, opt + 40, 6, 0, 1, 0, 6, 0)
    struct.pack_into("<III", buf, opt + 56, size_of_image, size_of_headers, checksum)
    struct.pack_into("<HH", buf, opt + 68, 3, 0)     # console subsystem
    if pe32plus:
        struct.pack_into("<QQQQ", buf, opt + 72,
                         0x100000, 0x1000, 0x100000, 0x1000)
        struct.pack_into("<II", buf, opt + 104, 0, 16)
        dir_off = opt + 112
    else:
        struct.pack_into("<IIII", buf, opt + 72,
                         0x100000, 0x1000, 0x100000, 0x1000)
        struct.pack_into("<II", buf, opt + 88, 0, 16)
        dir_off = opt + 96
    for i, (rva, size) in enumerate(data_dirs):
        struct.pack_into("<II", buf, dir_off + 8 * i, rva, size)

    for i, (spec, sec_va, vsize, raw_size, sec_ptr) in enumerate(rows):
        off = table_off + i * 40
        buf[off:off + 8] = spec.name[:8].ljust(8, b"\x00")
        struct.pack_into("<IIII", buf, off + 8, vsize, sec_va, raw_size, sec_ptr)
        struct.pack_into("<I", buf, off + 36, spec.characteristics)

    for spec, _va, _v, raw_size, _p in rows:
        chunk = spec.data[:raw_size].ljust(raw_size, b"\x00")
        buf += chunk

    buf += overlay
    return bytes(buf)


def _codeish_bytes(rng: random.Random, length: int) -> bytes:
    """Low-entropy instruction-soup filler for .text sections."""
    common = [0x00, 0x8B, 0x89, 0x55, 0x56, 0x57, 0x53, 0xE8, 0xC3, 0x83,
              0xFF, 0x90, 0x08, 0x04, 0x24, 0x45, 0xEC, 0x75, 0x74, 0x01]
    return bytes(rng.choice(common) for _ in range(length))


def minimal_fixture(seed: int = 0, *, pe32plus: bool = False,
                    n_sections: int = 2, overlay_size: int = 0,
                    slack_capacity: int = 0,
                    with_imports: bool = True,
                    with_exports: bool = False,
                    debug_dir: bool = False) -> bytes:
    """Small deterministic fixture with seeded section contents.

    ``slack_capacity`` adds a trailing data section whose raw size exceeds
    its virtual size by at least that many bytes.
    """
    rng = random.Random(seed)
    sections = [SectionSpec(name=b".text",
                            data=_codeish_bytes(rng, rng.randrange(700, 1600)),
                            characteristics=CODE_CHARACTERISTICS)]
    names = [b".data", b".rdata", b".rsrc", b".bss0"]
    for i in range(max(0, n_sections - 1)):
        payload = bytes(rng.randrange(0, 256) for _ in range(rng.randrange(64, 400)))
        text = b"\x00".join(w.encode() for w in
                            ("config=%d" % rng.randrange(10_000),
                             "build-%08x" % rng.getrandbits(32)))
        sections.append(SectionSpec(name=names[i % len(names)],
                                    data=text + b"\x00" + payload))
    if slack_capacity > 0:
        filler = _codeish_bytes(rng, 96)
        sections.append(SectionSpec(name=b".pad", data=filler,
                                    virtual_size=len(filler),
                                    extra_raw=slack_capacity))
    imports = {"kernel32.dll": ["ExitProcess", "CreateFileW", "ReadFile"],
               "user32.dll": ["MessageBoxW"]} if with_imports else None
    exports = ["InitHelper", "RunHelper"] if with_exports else None
    overlay = bytes(rng.randrange(0, 256) for _ in range(overlay_size))
    return build_pe(sections, imports=imports, exports=exports,
                    overlay=overlay, pe32plus=pe32plus,
                    timestamp=0x5E000000 + seed % 0xFFFF,
                    debug_dir=debug_dir)


def fixture_corpus(count: int, seed: int = 0) -> List[bytes]:
    """A varied deterministic corpus mixing PE32/PE32+ and layout features."""
    out = []
    for i in range(count):
        out.append(minimal_fixture(
            seed=seed * 10_007 + i,
            pe32plus=(i % 3 == 1),
            n_sections=1 + (i % 4),
            overlay_size=(0, 96, 2048)[i % 3],
            slack_capacity=(0, 600)[i % 2],
            with_imports=(i % 5 != 4),
            with_exports=(i % 4 == 2),
            debug_dir=(i % 6 == 3),
        ))
    return out
