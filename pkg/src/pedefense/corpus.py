"""Synthetic desk-scale corpus with benign and malware profiles.

Generates deterministic PE files whose discriminative structure mirrors the
signals the real detectors key on, at a scale that trains in seconds:

* benign files: code-like sections, string-rich data sections, benign
  import sets, low-entropy content (a minority carry one high-entropy
  "compressed resource" section so section entropy alone is not a clean
  separator);
* malware files: the same skeleton plus a high-entropy packed section,
  plain-``http://`` URLs and ``HKEY_`` run-key strings, a repeated family
  marker drawn from a small set of invented families, and a few suspicious
  imports.

String counts and file sizes deliberately overlap between classes, so
models must rely on content shape (histograms, entropy, counts of the
malicious tokens) rather than bulk statistics an attacker can inflate.
"""

from __future__ import annotations

import csv
import random
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

from .fixtures import (
    CODE_CHARACTERISTICS,
    DATA_CHARACTERISTICS,
    SectionSpec,
    build_pe,
    _codeish_bytes,
)

FAMILY_MARKERS: Tuple[bytes, ...] = (
    b"XKEYRON_BUILD_7A",
    b"mutex_vx_draugen_02",
    b"krypt0lock_core.pdb",
    b"NEBULIX-STAGE2-CFG",
    b"svc_hollowveil_boot",
    b"GRIMWELD when ready",
    b"opaque.rusterm.call",
    b"VANTAMOTH_DROPPED_OK",
)

BENIGN_IMPORTS = {
    "kernel32.dll": ["CreateFileW", "ReadFile", "WriteFile", "CloseHandle",
                     "GetModuleHandleW", "HeapAlloc", "ExitProcess",
                     "GetLastError", "Sleep", "LoadLibraryW"],
    "user32.dll": ["MessageBoxW", "LoadStringW", "CreateWindowExW",
                   "DefWindowProcW", "ShowWindow", "GetDC"],
    "gdi32.dll": ["SelectObject", "CreateFontIndirectW", "DeleteObject"],
    "advapi32.dll": ["RegOpenKeyExW", "RegQueryValueExW", "RegCloseKey"],
    "msvcrt.dll": ["malloc", "free", "memcpy", "printf", "fopen", "fclose"],
    "shell32.dll": ["ShellExecuteW", "SHGetFolderPathW"],
}

SUSPICIOUS_IMPORTS = {
    "ws2_32.dll": ["socket", "connect", "send", "recv", "WSAStartup",
                   "gethostbyname"],
    "wininet.dll": ["InternetOpenA", "InternetConnectA", "HttpSendRequestA",
                    "InternetReadFile"],
    "urlmon.dll": ["URLDownloadToFileA"],
    "advapi32.dll": ["RegSetValueExW", "RegCreateKeyExW", "CryptEncrypt",
                     "CryptAcquireContextW", "AdjustTokenPrivileges"],
    "psapi.dll": ["EnumProcesses"],
}

BENIGN_STRINGS = [
    "C:\\Program Files\\Common Files\\system\\runtime",
    "C:\\Windows\\System32\\drivers\\etc",
    "Software update completed successfully.",
    "Unable to open configuration file: %s",
    "Usage: %s [options] <input-file>",
    "Copyright (c) 2013-2019 Fenwick Systems",
    "Language pack resources loaded",
    "document.template.v2", "toolbar.layout.default",
    "StringFileInfo", "VarFileInfo", "ProductVersion", "FileDescription",
    "Segoe UI", "Tahoma", "Courier New",
    "January", "February", "September", "December",
    "invalid argument", "out of memory", "permission denied",
    "connection timed out", "operation completed",
    "application/x-www-form-urlencoded",
    "--verbose", "--output", "--config", "settings.ini", "cache.dat",
    "The quick brown fox jumps over the lazy dog",
]

BENIGN_HTTPS = [
    "https://download.fenwick-systems.example/updates/",
    "https://telemetry.apphub.example/v2/events",
    "https://fonts.vendorcdn.example/pack.css",
]

MAL_HTTP_HOSTS = [
    "update-svc%d.gateway-relay.info",
    "cdn%d.bright-metrics.biz",
    "files%d.trustpool-sync.net",
    "api%d.silent-beacon.org",
]

MAL_REGISTRY = [
    "HKEY_LOCAL_MACHINE\\Software\\Microsoft\\Windows\\CurrentVersion\\Run",
    "HKEY_CURRENT_USER\\Software\\Microsoft\\Windows\\CurrentVersion\\RunOnce",
    "HKEY_LOCAL_MACHINE\\System\\CurrentControlSet\\Services\\%s",
]

MAL_EXTRA = [
    "Global\\mx_%08x", "pipe\\remote_shell_%04d", "SELF_DELETE_BAT",
    "payload.stage.%d", "C:\\Users\\Public\\wupdate.tmp",
]


# Shared name pool for high-entropy sections in BOTH classes, so the section
# name hash never becomes a packed-content shortcut the models could key on.
_HIGH_ENTROPY_SECTION_NAMES = (b".rsrc", b".cdata", b".pdata", b".xdata")


def _structured_filler(rng: random.Random, length: int) -> bytes:
    """Low-entropy data: a random 16-byte tile repeated with zero padding."""
    tile = bytes(rng.randrange(256) for _ in range(16))
    reps = tile * (length // 16 + 1)
    out = bytearray(reps[:length])
    for i in range(0, length, 64):
        out[i:i + 4] = b"\x00\x00\x00\x00"
    return bytes(out)


def _string_blob(rng: random.Random, strings: Sequence[str]) -> bytes:
    return b"\x00".join(s.encode("latin-1") for s in strings) + b"\x00"


def _benign_string_pool(rng: random.Random) -> List[str]:
    count = rng.randrange(18, 60)
    pool = [rng.choice(BENIGN_STRINGS) for _ in range(count)]
    if rng.random() < 0.15:
        pool += [rng.choice(BENIGN_HTTPS)] * rng.randrange(1, 3)
    if rng.random() < 0.25:
        # plain-http endpoints do appear in benign software
        pool += ["http://ocsp.fenwick-systems.example/status"] * rng.randrange(1, 3)
    pool += ["build-%08x" % rng.getrandbits(32) for _ in range(3)]
    return pool


def _malware_strings(rng: random.Random, marker: Optional[bytes],
                     n_http: int, n_registry: int) -> List[str]:
    pool = [rng.choice(BENIGN_STRINGS) for _ in range(rng.randrange(12, 45))]
    for _ in range(n_http):
        host = rng.choice(MAL_HTTP_HOSTS) % rng.randrange(100)
        pool.append(f"http://{host}/g{rng.getrandbits(24):06x}.bin")
    for _ in range(n_registry):
        key = rng.choice(MAL_REGISTRY)
        pool.append(key % f"svchelper{rng.randrange(90)}" if "%s" in key else key)
    for _ in range(rng.randrange(2, 6)):
        extra = rng.choice(MAL_EXTRA)
        if "%08x" in extra:
            extra = extra % rng.getrandbits(32)
        elif "%04d" in extra or "%d" in extra:
            extra = extra % rng.randrange(10_000)
        pool.append(extra)
    rng.shuffle(pool)
    if marker is not None:
        for _ in range(rng.randrange(3, 9)):
            pool.insert(rng.randrange(len(pool) + 1), marker.decode("latin-1"))
    return pool


def _pick_imports(rng: random.Random, pools, n_libs: int, max_funcs: int):
    libs = rng.sample(sorted(pools), min(n_libs, len(pools)))
    out = {}
    for lib in libs:
        funcs = pools[lib]
        hi = min(max_funcs, len(funcs))
        k = rng.randrange(min(2, hi), hi + 1)
        out[lib] = rng.sample(funcs, k)
    return out


def _finish(rng: random.Random, sections, imports, exports) -> bytes:
    """Assemble, keeping any overlay well under the detector's 0.25 ratio."""
    base = build_pe(sections, imports=imports, exports=exports,
                    pe32plus=rng.random() < 0.35,
                    timestamp=rng.randrange(0x54000000, 0x61000000))
    if rng.random() < 0.3:
        overlay_len = max(128, int(len(base) * rng.uniform(0.02, 0.12)))
        return base + rng.randbytes(overlay_len)
    return base


def generate_benign(rng: random.Random) -> bytes:
    sections = [
        SectionSpec(b".text", _codeish_bytes(rng, rng.randrange(2000, 9000)),
                    characteristics=CODE_CHARACTERISTICS),
        SectionSpec(b".data",
                    _string_blob(rng, _benign_string_pool(rng))
                    + _structured_filler(rng, rng.randrange(800, 4000))),
        SectionSpec(b".rdata", _structured_filler(rng, rng.randrange(500, 2500))),
    ]
    if rng.random() < 0.15:
        sections.append(SectionSpec(
            rng.choice(_HIGH_ENTROPY_SECTION_NAMES),
            rng.randbytes(rng.randrange(2000, 9000))))
    imports = _pick_imports(rng, BENIGN_IMPORTS, rng.randrange(2, 5), 8)
    exports = (["CfgInit", "CfgRelease", "RenderFrame"][:rng.randrange(1, 4)]
               if rng.random() < 0.3 else None)
    return _finish(rng, sections, imports, exports)


def generate_malware(rng: random.Random, marker: Optional[bytes] = None,
                     packed: Optional[bool] = None,
                     suspicious_imports: bool = True,
                     n_http: Optional[int] = None,
                     n_registry: Optional[int] = None) -> bytes:
    """One malware-profile file; ``marker=None`` draws a random family."""
    if marker is None:
        marker = FAMILY_MARKERS[rng.randrange(len(FAMILY_MARKERS))]
    if packed is None:
        packed = rng.random() < 0.9
    if n_http is None:
        n_http = rng.randrange(2, 11)
    if n_registry is None:
        n_registry = rng.randrange(2, 7)
    strings = _malware_strings(rng, marker, n_http, n_registry)
    sections = [
        SectionSpec(b".text", _codeish_bytes(rng, rng.randrange(2000, 9000)),
                    characteristics=CODE_CHARACTERISTICS),
        SectionSpec(b".data",
                    _string_blob(rng, strings)
                    + _structured_filler(rng, rng.randrange(400, 2500))),
    ]
    if packed:
        sections.append(SectionSpec(
            rng.choice(_HIGH_ENTROPY_SECTION_NAMES),
            rng.randbytes(rng.randrange(4000, 16000))))
    else:
        sections.append(SectionSpec(
            b".rdata", _structured_filler(rng, rng.randrange(500, 2500))))
    imports = _pick_imports(rng, BENIGN_IMPORTS, rng.randrange(1, 4), 6)
    if suspicious_imports:
        imports.update(_pick_imports(rng, SUSPICIOUS_IMPORTS,
                                     rng.randrange(2, 5), 5))
    exports = (["CfgInit", "CfgRelease"] if rng.random() < 0.1 else None)
    return _finish(rng, sections, imports, exports)


def make_attack_sample(seed: int = 0) -> bytes:
    """An unmarked dropper-profile sample for the red-team experiments.

    Benign import set, no family marker, no registry strings: the packed
    payload section and plain-http URLs are its only malicious traits, so
    signature and family-keyed components stay silent while histogram- and
    string-count-driven models fire.
    """
    rng = random.Random(seed)
    strings = _malware_strings(rng, marker=None, n_http=6, n_registry=0)
    sections = [
        SectionSpec(b".text", _codeish_bytes(rng, 4200),
                    characteristics=CODE_CHARACTERISTICS),
        SectionSpec(b".data", _string_blob(rng, strings)
                    + _structured_filler(rng, 1200)),
        SectionSpec(b".rsrc", rng.randbytes(10_000)),
    ]
    imports = _pick_imports(rng, BENIGN_IMPORTS, 3, 7)
    return build_pe(sections, imports=imports,
                    timestamp=rng.randrange(0x54000000, 0x61000000))


def generate_samples(n_benign: int, n_malware: int,
                     seed: int = 0) -> List[Tuple[bytes, str]]:
    """In-memory corpus: deterministic list of (bytes, label)."""
    out: List[Tuple[bytes, str]] = []
    for i in range(n_benign):
        out.append((generate_benign(random.Random(seed * 1_000_003 + i)), "benign"))
    for i in range(n_malware):
        out.append((generate_malware(random.Random(seed * 2_000_003 + 500_000 + i)),
                    "malware"))
    return out


def generate_corpus(out_dir, n_benign: int, n_malware: int,
                    seed: int = 0) -> Path:
    """Write corpus files plus a ``manifest.csv`` of (path, label) rows."""
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    manifest = out_path / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for i, (data, label) in enumerate(generate_samples(n_benign, n_malware, seed)):
            name = f"{label}_{i:05d}.exe"
            (out_path / name).write_bytes(data)
            writer.writerow([name, label])
    return manifest


def load_manifest(manifest_path) -> List[Tuple[Path, str]]:
    base = Path(manifest_path).parent
    entries = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            path, label = row[0].strip(), row[1].strip()
            if label not in ("benign", "malware"):
                raise ValueError(f"bad label {label!r} in {manifest_path}")
            entries.append(((base / path), label))
    return entries


def read_corpus(manifest_path) -> Iterator[Tuple[bytes, str]]:
    for path, label in load_manifest(manifest_path):
        yield path.read_bytes(), label


CANDIDATE_RULES = r'''
// one rule per known family marker
rule fam_xkeyron {
  strings:
    $m = "XKEYRON_BUILD_7A"
  condition: any of them
}
rule fam_draugen {
  strings:
    $m = "mutex_vx_draugen_02"
  condition: any of them
}
rule fam_kryptolock {
  strings:
    $m = "krypt0lock_core.pdb"
  condition: any of them
}
rule fam_nebulix {
  strings:
    // 4E 45 42 55 4C 49 58 = NEBULIX, wildcard over the dash
    $m = { 4E 45 42 55 4C 49 58 ?? 53 54 41 47 45 32 }
  condition: any of them
}
rule fam_hollowveil {
  strings:
    $m = "svc_hollowveil_boot" nocase
  condition: any of them
}
rule fam_grimweld {
  strings:
    $m = "GRIMWELD when ready"
  condition: any of them
}
rule fam_rusterm {
  strings:
    $m = "opaque.rusterm.call"
  condition: any of them
}
rule fam_vantamoth {
  strings:
    $m = "VANTAMOTH_DROPPED_OK"
  condition: any of them
}
// generic loader behavior: beacons over plain http AND touches a run key
rule generic_loader {
  strings:
    $u = "http://"
    $r = "HKEY_"
  condition: $u and $r
}
// decoys that calibration must drop: present in benign files too
rule decoy_program_files {
  strings:
    $p = "Program Files"
  condition: any of them
}
rule decoy_https {
  strings:
    $h = "https://" nocase
  condition: any of them
}
// matches nothing in the corpus
rule dead_rule {
  strings:
    $z = "THIS_TOKEN_NEVER_OCCURS_9f2c"
  condition: any of them
}
'''


def write_candidate_rules(path) -> Path:
    path = Path(path)
    path.write_text(CANDIDATE_RULES, encoding="utf-8")
    return path
