"""Static feature extraction: raw-byte and parsed feature groups.

Eight feature groups are implemented (header features are intentionally
absent everywhere: they are trivially attacker-controlled).  Four hardened
variant configurations combine the groups with two stream transforms:

* ``default`` -- every group, full byte stream.
* ``v1``      -- every group, stream truncated to the virtual size and
  printable strings removed from the bytes feeding the two histograms.
* ``v2``      -- section/import/export/general/string groups only, no
  printable-character histogram, truncated stream.
* ``v3``      -- same as ``v2``, tagged for the newer training corpus.

Group encodings (dimensions, hashing scheme, seeds) are frozen here; model
files depend on them bit-exactly.  Feature order within a vector follows
``GROUP_ORDER`` with a trailing parse-failure indicator.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import pe as pefmt
from .hashing import hash_pairs_signed, hash_strings_signed

# Hash seeds, one per hashed sub-group (frozen; models depend on them).
SEED_SECTION_NAMES = 0x53454301
SEED_SECTION_ENTROPY = 0x53454302
SEED_IMPORT_LIBS = 0x494D5001
SEED_IMPORT_PAIRS = 0x494D5002
SEED_EXPORT_NAMES = 0x45585001

ENTROPY_WINDOW = 2048
ENTROPY_STEP = 1024
ENTROPY_MIN_PARTIAL = 256

MIN_STRING_LENGTH = 5

_STRING_RUN_RE = re.compile(b"[\x20-\x7e]{%d,}" % MIN_STRING_LENGTH)
_PATH_RE = re.compile(rb"c:\\", re.IGNORECASE)
_HTTP_RE = re.compile(rb"http://", re.IGNORECASE)
_HTTPS_RE = re.compile(rb"https://", re.IGNORECASE)
_HKEY_RE = re.compile(rb"HKEY_")
_MZ_RE = re.compile(rb"MZ")

GROUP_ORDER = ("general", "strings", "byte_histogram", "byte_entropy_histogram",
               "section", "imports", "exports", "data_directory")

GENERAL_DIM = 8
STRINGS_BASE_DIM = 9
STRINGS_HIST_DIM = 96
SECTION_DIM = 5 + 50 + 50
IMPORTS_DIM = 256 + 1024
EXPORTS_DIM = 128
DATA_DIRECTORY_DIM = 30
HISTOGRAM_DIM = 256


@dataclass(frozen=True)
class VariantConfig:
    """A named combination of feature groups and stream transforms."""
    name: str
    groups: Tuple[str, ...]
    truncate_to_virtual_size: bool = False
    strip_strings_from_byte_stream: bool = False
    include_printable_string_histogram: bool = True
    corpus_tag: str = "2017"

    def __post_init__(self):
        unknown = set(self.groups) - set(GROUP_ORDER)
        if unknown:
            raise ValueError(f"unknown feature groups: {sorted(unknown)}")

    def group_dim(self, group: str) -> int:
        if group == "strings":
            base = STRINGS_BASE_DIM
            return base + (STRINGS_HIST_DIM
                           if self.include_printable_string_histogram else 0)
        return {"general": GENERAL_DIM,
                "byte_histogram": HISTOGRAM_DIM,
                "byte_entropy_histogram": HISTOGRAM_DIM,
                "section": SECTION_DIM,
                "imports": IMPORTS_DIM,
                "exports": EXPORTS_DIM,
                "data_directory": DATA_DIRECTORY_DIM}[group]

    @property
    def dimension(self) -> int:
        """Total vector length, including the parse-failure indicator."""
        ordered = [g for g in GROUP_ORDER if g in self.groups]
        return sum(self.group_dim(g) for g in ordered) + 1


_REDUCED_GROUPS = ("general", "strings", "section", "imports", "exports")

VARIANTS: Dict[str, VariantConfig] = {
    "default": VariantConfig("default", GROUP_ORDER),
    "v1": VariantConfig("v1", GROUP_ORDER,
                        truncate_to_virtual_size=True,
                        strip_strings_from_byte_stream=True),
    "v2": VariantConfig("v2", _REDUCED_GROUPS,
                        truncate_to_virtual_size=True,
                        include_printable_string_histogram=False),
    "v3": VariantConfig("v3", _REDUCED_GROUPS,
                        truncate_to_virtual_size=True,
                        include_printable_string_histogram=False,
                        corpus_tag="2018"),
}


@dataclass
class FeatureVector:
    values: np.ndarray
    config: VariantConfig

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.config.dimension,):
            raise ValueError(
                f"vector length {self.values.shape} does not match "
                f"variant {self.config.name} dimension {self.config.dimension}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature vector contains NaN or infinity")


def shannon_entropy(counts: np.ndarray) -> float:
    """Entropy in bits of a count distribution (0.0 for an empty one)."""
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def byte_histogram(data: bytes) -> np.ndarray:
    """Normalized 256-bin byte histogram; all-zero for empty input."""
    if not data:
        return np.zeros(HISTOGRAM_DIM, dtype=np.float64)
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    return counts / counts.sum()


def _entropy_windows(n: int) -> List[Tuple[int, int]]:
    """Window (start, stop) pairs for the byte-entropy histogram.

    The 2048-byte window slides by 1024; a file shorter than one window is
    a single whole-file window, and the trailing partial window after the
    last full one is kept only when it holds at least 256 bytes.
    """
    if n == 0:
        return []
    if n < ENTROPY_WINDOW:
        return [(0, n)]
    windows = []
    i = 0
    while i + ENTROPY_WINDOW <= n:
        windows.append((i, i + ENTROPY_WINDOW))
        i += ENTROPY_STEP
    if i < n and n - i >= ENTROPY_MIN_PARTIAL:
        windows.append((i, n))
    return windows


def byte_entropy_histogram(data: bytes) -> np.ndarray:
    """Joint (window entropy, coarse byte value) histogram, 16x16 flattened.

    Per window the byte values are coarsened to their high nibble, the
    Shannon entropy of that 16-symbol distribution selects a row in
    ``min(floor(4*H), 15)``, and the window's coarse counts accumulate into
    that row.  The grid is normalized to sum to one at the end.
    """
    grid = np.zeros((16, 16), dtype=np.float64)
    coarse = np.frombuffer(data, dtype=np.uint8) >> 4
    for start, stop in _entropy_windows(len(data)):
        counts = np.bincount(coarse[start:stop], minlength=16)
        h = shannon_entropy(counts)
        row = min(int(h * 4), 15)
        grid[row] += counts
    total = grid.sum()
    if total > 0:
        grid /= total
    return grid.ravel()


def string_features(data: bytes, include_histogram: bool = True) -> np.ndarray:
    """Statistics over printable-ASCII runs of five or more characters.

    Scalars: run count, average length, total printable characters,
    character-distribution entropy, and occurrence counts of ``C:\\``,
    ``http://``, ``https://`` (case-insensitive), ``HKEY_`` and ``MZ``.
    The optional histogram has 96 bins for characters 0x20..0x7f, normalized
    by the total printable count (the last bin is unreachable given the
    0x20-0x7e run definition and stays zero).
    """
    runs = _STRING_RUN_RE.findall(data)
    if runs:
        joined = b"".join(runs)
        shifted = np.frombuffer(joined, dtype=np.uint8) - 0x20
        hist = np.bincount(shifted, minlength=STRINGS_HIST_DIM).astype(np.float64)
        printables = len(joined)
        avlength = printables / len(runs)
        entropy = shannon_entropy(hist)
    else:
        hist = np.zeros(STRINGS_HIST_DIM, dtype=np.float64)
        printables = 0
        avlength = 0.0
        entropy = 0.0
    scalars = [
        len(runs), avlength, printables, entropy,
        len(_PATH_RE.findall(data)),
        len(_HTTP_RE.findall(data)),
        len(_HTTPS_RE.findall(data)),
        len(_HKEY_RE.findall(data)),
        len(_MZ_RE.findall(data)),
    ]
    if not include_histogram:
        return np.asarray(scalars, dtype=np.float64)
    normalized = hist / printables if printables else hist
    return np.concatenate([np.asarray(scalars, dtype=np.float64), normalized])


def strip_string_bytes(data: bytes) -> bytes:
    """Remove every byte belonging to a printable run of length >= 5."""
    return _STRING_RUN_RE.sub(b"", data)


class _ExtractionView:
    """Resolved per-file inputs for the group extractors.

    Centralizes the truncation semantics: with truncation enabled every
    group, including the parsed ones, sees the file as if slack and overlay
    did not exist.
    """

    def __init__(self, data: bytes, pe: Optional[pefmt.PeFile], truncate: bool):
        self.pe = pe
        self.truncated = truncate and pe is not None
        if self.truncated:
            self.stream = pefmt.truncate_to_virtual_size(pe)
        else:
            self.stream = data
        if pe is not None:
            self.imports, _ = pefmt.parse_imports(pe)
            self.exports, _ = pefmt.parse_exports(pe)
        else:
            self.imports, self.exports = {}, []

    def section_content(self, index: int) -> bytes:
        sec = self.pe.sections[index]
        data = self.pe.section_data(index)
        if self.truncated:
            return data[:min(len(data), sec.virtual_size)]
        return data

    @property
    def has_overlay(self) -> bool:
        if self.truncated:
            return False
        return len(self.pe.raw) - self.pe.overlay_offset > 0


def general_features(view: _ExtractionView) -> np.ndarray:
    pe = view.pe
    dirs = pe.optional_header.data_directories[:15]
    n_present = sum(1 for rva, size in dirs if rva or size)
    has_debug = (len(pe.optional_header.data_directories) > pefmt.DD_DEBUG
                 and any(pe.optional_header.data_directories[pefmt.DD_DEBUG]))
    return np.asarray([
        len(view.stream),
        sum(s.virtual_size for s in pe.sections),
        len(pe.sections),
        sum(len(v) for v in view.imports.values()),
        len(view.exports),
        1.0 if view.has_overlay else 0.0,
        1.0 if has_debug else 0.0,
        n_present,
    ], dtype=np.float64)


def section_features(view: _ExtractionView) -> np.ndarray:
    pe = view.pe
    entropies = []
    names = []
    n_exec = n_wx = 0
    for i, sec in enumerate(pe.sections):
        counts = np.bincount(
            np.frombuffer(view.section_content(i), dtype=np.uint8), minlength=256)
        entropies.append(shannon_entropy(counts))
        names.append(sec.name_str)
        if sec.is_executable:
            n_exec += 1
            if sec.is_writable:
                n_wx += 1
    aggregates = np.asarray([
        len(pe.sections),
        float(np.mean(entropies)) if entropies else 0.0,
        float(np.max(entropies)) if entropies else 0.0,
        n_exec,
        n_wx,
    ], dtype=np.float64)
    name_hash = hash_strings_signed(names, 50, seed=SEED_SECTION_NAMES)
    entropy_hash = hash_pairs_signed(zip(names, entropies), 50,
                                     seed=SEED_SECTION_ENTROPY)
    return np.concatenate([aggregates, name_hash, entropy_hash])


def import_features(imports: Dict[str, List[str]]) -> np.ndarray:
    libs = sorted({lib.lower() for lib in imports})
    pairs = [f"{lib.lower()}:{fn}" for lib, fns in imports.items() for fn in fns]
    return np.concatenate([
        hash_strings_signed(libs, 256, seed=SEED_IMPORT_LIBS),
        hash_strings_signed(pairs, 1024, seed=SEED_IMPORT_PAIRS),
    ])


def export_features(exports: Sequence[str]) -> np.ndarray:
    return hash_strings_signed(exports, 128, seed=SEED_EXPORT_NAMES)


def import_export_features(imports: Dict[str, List[str]],
                           exports: Sequence[str]) -> np.ndarray:
    """Combined import and export hashing blocks (1280 + 128 values)."""
    return np.concatenate([import_features(imports), export_features(exports)])


def data_directory_features(pe: pefmt.PeFile) -> np.ndarray:
    out = np.zeros(DATA_DIRECTORY_DIM, dtype=np.float64)
    for i, (rva, size) in enumerate(pe.optional_header.data_directories[:15]):
        out[2 * i] = rva
        out[2 * i + 1] = size
    return out


def extract_features(data: bytes, config: VariantConfig,
                     pe: Optional[pefmt.PeFile] = None) -> FeatureVector:
    """Extract the configured feature vector from raw file bytes.

    A pre-parsed :class:`PeFile` for the same bytes may be supplied to skip
    re-parsing.  Unparseable input degrades gracefully: format-agnostic
    groups are computed on the raw bytes, parsed groups are zero-filled,
    and the trailing parse-failure indicator is set.
    """
    parse_failed = False
    if pe is None:
        try:
            pe = pefmt.parse_pe(data)
        except pefmt.MalformedPe:
            pe = None
            parse_failed = True

    view = _ExtractionView(data, pe, config.truncate_to_virtual_size)
    hist_stream = (strip_string_bytes(view.stream)
                   if config.strip_strings_from_byte_stream else view.stream)

    parts = []
    for group in GROUP_ORDER:
        if group not in config.groups:
            continue
        if parse_failed and group not in ("strings", "byte_histogram",
                                          "byte_entropy_histogram"):
            parts.append(np.zeros(config.group_dim(group), dtype=np.float64))
            continue
        if group == "general":
            parts.append(general_features(view))
        elif group == "strings":
            parts.append(string_features(
                view.stream, config.include_printable_string_histogram))
        elif group == "byte_histogram":
            parts.append(byte_histogram(hist_stream))
        elif group == "byte_entropy_histogram":
            parts.append(byte_entropy_histogram(hist_stream))
        elif group == "section":
            parts.append(section_features(view))
        elif group == "imports":
            parts.append(import_features(view.imports))
        elif group == "exports":
            parts.append(export_features(view.exports))
        elif group == "data_directory":
            parts.append(data_directory_features(view.pe))
    parts.append(np.asarray([1.0 if parse_failed else 0.0]))
    return FeatureVector(values=np.concatenate(parts), config=config)


def file_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def append_dump_record(fh, digest: str, variant: str,
                       values: Iterable[float], label: Optional[int] = None) -> None:
    """Write one line-delimited dump record (full float precision)."""
    record = {"digest": digest, "variant": variant,
              "values": [float(v) for v in values]}
    if label is not None:
        record["label"] = int(label)
    fh.write(json.dumps(record) + "\n")


def load_dump(path) -> Tuple[str, List[str], Optional[np.ndarray], np.ndarray]:
    """Read a dump file: (variant, digests, labels-or-None, value matrix)."""
    digests: List[str] = []
    rows: List[List[float]] = []
    labels: List[int] = []
    variant = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if variant is None:
                variant = record["variant"]
            elif record["variant"] != variant:
                raise ValueError(
                    f"mixed variants in dump: {variant} vs {record['variant']}")
            digests.append(record["digest"])
            rows.append(record["values"])
            if "label" in record:
                labels.append(int(record["label"]))
    if variant is None:
        raise ValueError(f"empty feature dump: {path}")
    matrix = np.asarray(rows, dtype=np.float64)
    label_arr = np.asarray(labels, dtype=np.int64) if len(labels) == len(rows) else None
    return variant, digests, label_arr, matrix
