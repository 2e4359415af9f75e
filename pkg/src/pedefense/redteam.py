"""Red-team harness: structure-preserving file modifications and a
black-box attack loop.

Modifications only touch locations the loader ignores or that can be
re-wired consistently (overlay, slack, a fresh section, an enlarged DOS
header, header scalar fields), so the output always re-parses and all
untouched section content stays byte-identical.  Functionality preservation
is asserted structurally; no execution happens here.

The attack loop is a seeded hill climber over the modification pool with
flip-only feedback and an epsilon-greedy retention schedule, optionally
pre-screening candidates against a locally trained surrogate model before
spending oracle queries.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import pe as pefmt
from .features import VARIANTS, extract_features
from .fixtures import DATA_CHARACTERISTICS, align_up
from .gbdt import TrainConfig, TreeEnsemble, predict_one, train
from .pe import MalformedPe, PeFile, parse_pe, serialize_pe, slack_regions

MAX_FILE_SIZE = 2 * 1024 * 1024

MODIFICATION_KINDS = (
    "append_overlay", "fill_slack", "add_section", "extend_dos_header",
    "inject_benign_strings", "set_timestamp", "rename_sections",
    "break_checksum",
)

DEFAULT_ATTACK_POOL = ("append_overlay", "fill_slack", "add_section",
                       "inject_benign_strings")


class NotApplicable(ValueError):
    """The modification cannot be applied to this file."""


class SizeExceeded(ValueError):
    """The modified file would exceed the submission size limit."""


class NoStrings(ValueError):
    """The donor file contains no extractable printable strings."""


@dataclass(frozen=True)
class Modification:
    kind: str
    params: Tuple[Tuple[str, object], ...] = ()

    def __post_init__(self):
        if self.kind not in MODIFICATION_KINDS:
            raise ValueError(f"unknown modification kind {self.kind!r}")

    def param(self, name: str, default=None):
        return dict(self.params).get(name, default)


def append_overlay(payload: bytes) -> Modification:
    return Modification("append_overlay", (("payload", bytes(payload)),))


def fill_slack(payload: bytes) -> Modification:
    return Modification("fill_slack", (("payload", bytes(payload)),))


def add_section(content: bytes, name: bytes = b".stow",
                characteristics: int = DATA_CHARACTERISTICS) -> Modification:
    return Modification("add_section", (("content", bytes(content)),
                                        ("name", bytes(name)),
                                        ("characteristics", characteristics)))


def extend_dos_header(payload: bytes) -> Modification:
    return Modification("extend_dos_header", (("payload", bytes(payload)),))


def inject_benign_strings(strings: Sequence[str],
                          region: str = "overlay") -> Modification:
    if region not in ("overlay", "slack", "dos"):
        raise ValueError(f"unknown region {region!r}")
    return Modification("inject_benign_strings",
                        (("strings", tuple(strings)), ("region", region)))


def set_timestamp(value: int) -> Modification:
    return Modification("set_timestamp", (("value", int(value)),))


def rename_sections(renames: Dict[int, bytes]) -> Modification:
    return Modification("rename_sections",
                        (("renames", tuple(sorted(renames.items()))),))


def break_checksum(value: int = 0) -> Modification:
    return Modification("break_checksum", (("value", int(value)),))


# --------------------------------------------------------------------------
# application

def _apply_append_overlay(pe: PeFile, payload: bytes) -> bytes:
    return pe.raw + payload


def _apply_fill_slack(pe: PeFile, payload: bytes) -> bytes:
    regions = slack_regions(pe)
    capacity = sum(r.length for r in regions)
    if capacity == 0:
        raise NotApplicable("file has no slack space")
    buf = bytearray(pe.raw)
    pos = 0
    for region in regions:
        if pos >= len(payload):
            break
        chunk = payload[pos:pos + region.length]
        buf[region.offset:region.offset + len(chunk)] = chunk
        pos += len(chunk)
    return bytes(buf)


def _apply_add_section(pe: PeFile, content: bytes, name: bytes,
                       characteristics: int) -> bytes:
    opt = pe.optional_header
    e_lfanew = pe.dos_header.e_lfanew
    table_off = pefmt.section_table_offset(
        e_lfanew, pe.coff_header.size_of_optional_header)
    new_entry_off = table_off + len(pe.sections) * pefmt.SECTION_HEADER_SIZE
    first_ptr = min((s.pointer_to_raw_data for s in pe.sections
                     if s.size_of_raw_data > 0), default=len(pe.raw))
    room = min(opt.size_of_headers, first_ptr)
    if new_entry_off + pefmt.SECTION_HEADER_SIZE > room:
        raise NotApplicable("no reserved room in the section table")

    falign = max(opt.file_alignment, 1)
    salign = max(opt.section_alignment, 1)
    new_ptr = align_up(len(pe.raw), falign)
    new_va = align_up(max((s.virtual_address + max(s.virtual_size, 1)
                           for s in pe.sections), default=salign), salign)
    raw_size = align_up(max(len(content), 1), falign)

    buf = bytearray(pe.raw)
    buf += b"\x00" * (new_ptr - len(buf))
    buf += content.ljust(raw_size, b"\x00")
    buf[new_entry_off:new_entry_off + 8] = name[:8].ljust(8, b"\x00")
    struct.pack_into("<IIII", buf, new_entry_off + 8,
                     len(content), new_va, raw_size, new_ptr)
    struct.pack_into("<IIHH", buf, new_entry_off + 24, 0, 0, 0, 0)
    struct.pack_into("<I", buf, new_entry_off + 36, characteristics)
    struct.pack_into("<H", buf, e_lfanew + 6, len(pe.sections) + 1)
    size_of_image_off = pefmt.optional_header_offset(e_lfanew) + 56
    struct.pack_into("<I", buf, size_of_image_off,
                     align_up(new_va + max(len(content), 1), salign))
    return bytes(buf)


def _apply_extend_dos_header(pe: PeFile, payload: bytes) -> bytes:
    opt = pe.optional_header
    falign = max(opt.file_alignment, 1)
    padded = payload.ljust(align_up(max(len(payload), 1), falign), b"\x00")
    grow = len(padded)
    first_va = min((s.virtual_address for s in pe.sections),
                   default=opt.size_of_headers + grow)
    if opt.size_of_headers + grow > first_va:
        raise NotApplicable("extended header would overlap the first section")

    e_lfanew = pe.dos_header.e_lfanew
    buf = bytearray(pe.raw[:e_lfanew] + padded + pe.raw[e_lfanew:])
    new_e_lfanew = e_lfanew + grow
    struct.pack_into("<I", buf, pefmt.E_LFANEW_OFFSET, new_e_lfanew)
    opt_off = pefmt.optional_header_offset(new_e_lfanew)
    struct.pack_into("<I", buf, opt_off + 60, opt.size_of_headers + grow)
    table_off = pefmt.section_table_offset(
        new_e_lfanew, pe.coff_header.size_of_optional_header)
    for i, sec in enumerate(pe.sections):
        if sec.size_of_raw_data > 0:
            struct.pack_into("<I", buf,
                             table_off + i * pefmt.SECTION_HEADER_SIZE + 20,
                             sec.pointer_to_raw_data + grow)
    return bytes(buf)


def _strings_payload(strings: Sequence[str]) -> bytes:
    return b"".join(s.encode("latin-1") + b"\x00" for s in strings)


def apply(mod: Modification, pe: PeFile,
          max_file_size: int = MAX_FILE_SIZE) -> PeFile:
    """Apply one modification and re-parse the result.

    Raises :class:`NotApplicable` when the file lacks the required region
    and :class:`SizeExceeded` when the output would pass ``max_file_size``.
    """
    kind = mod.kind
    if kind == "append_overlay":
        new_raw = _apply_append_overlay(pe, mod.param("payload"))
    elif kind == "fill_slack":
        new_raw = _apply_fill_slack(pe, mod.param("payload"))
    elif kind == "add_section":
        new_raw = _apply_add_section(pe, mod.param("content"),
                                     mod.param("name", b".stow"),
                                     mod.param("characteristics",
                                               DATA_CHARACTERISTICS))
    elif kind == "extend_dos_header":
        new_raw = _apply_extend_dos_header(pe, mod.param("payload"))
    elif kind == "inject_benign_strings":
        payload = _strings_payload(mod.param("strings"))
        region = mod.param("region", "overlay")
        if region == "overlay":
            new_raw = _apply_append_overlay(pe, payload)
        elif region == "slack":
            new_raw = _apply_fill_slack(pe, payload)
        else:
            new_raw = _apply_extend_dos_header(pe, payload)
    elif kind == "set_timestamp":
        patched = replace(pe, coff_header=replace(
            pe.coff_header, timestamp=mod.param("value") & 0xFFFFFFFF))
        new_raw = serialize_pe(patched)
    elif kind == "rename_sections":
        renames = dict(mod.param("renames"))
        sections = list(pe.sections)
        for index, name in renames.items():
            if not 0 <= index < len(sections):
                raise NotApplicable(f"no section {index} to rename")
            sections[index] = replace(sections[index],
                                      name=bytes(name)[:8].ljust(8, b"\x00"))
        new_raw = serialize_pe(replace(pe, sections=tuple(sections)))
    elif kind == "break_checksum":
        patched = replace(pe, optional_header=replace(
            pe.optional_header, checksum=mod.param("value") & 0xFFFFFFFF))
        new_raw = serialize_pe(patched)
    else:
        raise ValueError(f"unknown modification kind {kind!r}")

    if len(new_raw) > max_file_size:
        raise SizeExceeded(f"{len(new_raw)} bytes exceeds {max_file_size}")
    return parse_pe(new_raw)


def mimicry_payload(benign_file: bytes, budget: int) -> bytes:
    """Printable strings of a benign donor, NUL-terminated, cut to ``budget``.

    A donor with fewer string bytes than the budget yields a shorter
    payload; nothing is repeated or padded.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    strings = pefmt.extract_printable_strings(benign_file)
    if not strings:
        raise NoStrings("donor has no printable strings")
    blob = b"".join(s.encode("ascii") + b"\x00" for _, s in strings)
    return blob[:budget]


# --------------------------------------------------------------------------
# black-box attack loop

@dataclass(frozen=True)
class AttackBudget:
    max_queries: int
    max_file_size: int = MAX_FILE_SIZE
    pool: Tuple[str, ...] = DEFAULT_ATTACK_POOL
    seed: int = 0

    def __post_init__(self):
        if self.max_queries < 1:
            raise ValueError("max_queries must be >= 1")
        for kind in self.pool:
            if kind not in MODIFICATION_KINDS:
                raise ValueError(f"unknown pool entry {kind!r}")


@dataclass
class AttackStep:
    query_index: int
    kind: str
    payload_size: int
    verdict: int
    kept: bool


@dataclass
class AttackOutcome:
    evaded: bool
    queries_used: int
    final_sample: bytes
    log: List[AttackStep] = field(default_factory=list)
    surrogate_screened: int = 0
    transfer_attempts: int = 0
    transfer_successes: int = 0

    @property
    def transfer_rate(self) -> Optional[float]:
        if self.transfer_attempts == 0:
            return None
        return self.transfer_successes / self.transfer_attempts


_PRINTABLE_FILLER = (b"configuration resources loaded module version "
                     b"update service component manifest ")


def _candidate_payload(rng: random.Random, size: int,
                       donor: Optional[bytes]) -> bytes:
    if donor is not None:
        try:
            blob = mimicry_payload(donor, size)
        except NoStrings:
            blob = b""
        if blob:
            # the attack may loop a short donor to fill its chosen size
            if len(blob) < size:
                blob = (blob * (size // len(blob) + 1))[:size]
            return blob
    reps = _PRINTABLE_FILLER * (size // len(_PRINTABLE_FILLER) + 1)
    return reps[:size]


def _make_candidate(rng: random.Random, current: PeFile, kind: str,
                    size: int, donor: Optional[bytes],
                    max_file_size: int) -> PeFile:
    if kind == "append_overlay":
        mod = append_overlay(_candidate_payload(rng, size, donor))
    elif kind == "fill_slack":
        capacity = sum(r.length for r in slack_regions(current))
        if capacity == 0:
            raise NotApplicable("no slack")
        mod = fill_slack(_candidate_payload(rng, min(size, capacity), donor))
    elif kind == "add_section":
        name = rng.choice([b".rdata2", b".didat", b".shared", b".aux"])
        mod = add_section(_candidate_payload(rng, size, donor), name=name)
    elif kind == "inject_benign_strings":
        payload = _candidate_payload(rng, size, donor)
        words = [w for w in payload.decode("latin-1").split("\x00") if w]
        mod = inject_benign_strings(words or ["padding"],
                                    region=rng.choice(["overlay", "slack"]))
    elif kind == "extend_dos_header":
        mod = extend_dos_header(_candidate_payload(rng, min(size, 2048), donor))
    elif kind == "set_timestamp":
        mod = set_timestamp(rng.randrange(0x40000000, 0x62000000))
    elif kind == "rename_sections":
        idx = rng.randrange(len(current.sections))
        mod = rename_sections({idx: rng.choice([b".text0", b".rsrc1", b".reloc"])})
    elif kind == "break_checksum":
        mod = break_checksum(rng.randrange(1 << 32))
    else:
        raise NotApplicable(f"unhandled kind {kind}")
    return apply(mod, current, max_file_size=max_file_size)


def blackbox_attack(oracle: Callable[[bytes], int], malware: bytes,
                    budget: AttackBudget,
                    donor: Optional[bytes] = None,
                    surrogate: Optional[Callable[[bytes], float]] = None,
                    surrogate_threshold: float = 0.5) -> AttackOutcome:
    """Iterative evasion against a binary black-box oracle.

    Hill climbing with flip-only feedback: each round applies one sampled
    modification to the current sample and queries the oracle; a candidate
    that flips the verdict wins, otherwise it is retained with an
    epsilon-greedy probability so content accumulates across rounds.  When a
    ``surrogate`` scorer is given, candidates it still considers malicious
    are discarded without spending an oracle query, and the transfer rate of
    surrogate-evading candidates is tracked.
    """
    queries = 0

    def query(data: bytes) -> int:
        nonlocal queries
        queries += 1
        return int(oracle(data))

    rng = random.Random(budget.seed)
    log: List[AttackStep] = []
    outcome = AttackOutcome(evaded=False, queries_used=0, final_sample=malware,
                            log=log)

    verdict = query(malware)
    log.append(AttackStep(queries, "initial", len(malware), verdict, True))
    if verdict == 0:
        outcome.evaded = True
        outcome.queries_used = queries
        return outcome

    current = parse_pe(malware)
    kept_rounds = 0
    rounds = 0
    stale = 0
    while queries < budget.max_queries and stale < 200:
        rounds += 1
        kind = rng.choice(budget.pool)
        size = 2048 << min(kept_rounds, 7)
        size = min(size, budget.max_file_size - len(current.raw))
        if size <= 0 and kind in ("append_overlay", "add_section",
                                  "inject_benign_strings", "extend_dos_header"):
            stale += 1
            continue
        try:
            candidate = _make_candidate(rng, current, kind, max(size, 1),
                                        donor, budget.max_file_size)
        except (NotApplicable, SizeExceeded, MalformedPe):
            stale += 1
            continue

        if surrogate is not None:
            score = float(surrogate(candidate.raw))
            if score >= surrogate_threshold:
                outcome.surrogate_screened += 1
                stale += 1
                continue
            outcome.transfer_attempts += 1

        verdict = query(candidate.raw)
        stale = 0
        if verdict == 0:
            log.append(AttackStep(queries, kind, size, verdict, True))
            if surrogate is not None:
                outcome.transfer_successes += 1
            outcome.evaded = True
            outcome.final_sample = candidate.raw
            outcome.queries_used = queries
            return outcome

        epsilon = max(0.3, 0.9 * (0.99 ** rounds))
        kept = rng.random() < epsilon
        log.append(AttackStep(queries, kind, size, verdict, kept))
        if kept:
            current = candidate
            kept_rounds += 1

    outcome.final_sample = current.raw
    outcome.queries_used = queries
    return outcome


# --------------------------------------------------------------------------
# surrogate model

@dataclass
class Surrogate:
    ensemble: TreeEnsemble

    def score(self, data: bytes) -> float:
        fv = extract_features(data, VARIANTS["default"])
        return predict_one(self.ensemble, fv.values)

    def __call__(self, data: bytes) -> float:
        return self.score(data)


def build_surrogate(local_data: Sequence[Tuple[bytes, str]],
                    config: Optional[TrainConfig] = None) -> Surrogate:
    """Train an attacker-side model on locally available labeled files."""
    config = config or TrainConfig(num_trees=40, max_depth=5,
                                   histogram_bins=64, min_samples_leaf=10)
    X = np.vstack([extract_features(b, VARIANTS["default"]).values
                   for b, _ in local_data])
    y = np.array([1 if label == "malware" else 0 for _, label in local_data])
    return Surrogate(ensemble=train(X, y, config,
                                    metadata={"variant": "surrogate"}))
