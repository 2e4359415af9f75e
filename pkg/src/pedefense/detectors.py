"""Semantic-gap detectors.

Three cheap structural heuristics that catch content stashed in regions a
loaded program never uses: filled slack space between sections, an
oversized overlay, and duplicated section content.  Each detector returns
an evidence-carrying verdict and is a pure function of the file bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List

from .pe import PeFile, slack_regions

DEFAULT_SLACK_NONZERO_FRACTION = 0.05
DEFAULT_OVERLAY_RATIO = 0.25

DETECTOR_SLACK = "slack"
DETECTOR_OVERLAY = "overlay"
DETECTOR_DUPLICATE = "duplicate"


@dataclass(frozen=True)
class GapVerdict:
    flagged: bool
    detector: str
    detail: str = ""


@dataclass(frozen=True)
class DetectorConfig:
    slack_nonzero_fraction: float = DEFAULT_SLACK_NONZERO_FRACTION
    overlay_ratio: float = DEFAULT_OVERLAY_RATIO


def scan_slack(pe: PeFile,
               nonzero_fraction_threshold: float = DEFAULT_SLACK_NONZERO_FRACTION
               ) -> GapVerdict:
    """Flag when any slack region's non-zero-byte fraction exceeds the threshold.

    Benign linkers fill slack with zeros (occasionally short padding tags),
    so a small tolerance avoids false positives; the comparison is a strict
    inequality.
    """
    if not 0.0 <= nonzero_fraction_threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    for region in slack_regions(pe):
        if region.length == 0:
            continue
        chunk = pe.raw[region.offset:region.offset + region.length]
        nonzero = region.length - chunk.count(0)
        fraction = nonzero / region.length
        if fraction > nonzero_fraction_threshold:
            return GapVerdict(
                True, DETECTOR_SLACK,
                f"section {region.section_index} slack at 0x{region.offset:x}: "
                f"{nonzero}/{region.length} non-zero bytes "
                f"(fraction {fraction:.3f})")
    return GapVerdict(False, DETECTOR_SLACK)


def scan_overlay(pe: PeFile,
                 ratio_threshold: float = DEFAULT_OVERLAY_RATIO) -> GapVerdict:
    """Flag when the overlay occupies at least ``ratio_threshold`` of the file."""
    if not 0.0 < ratio_threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    overlay_len = len(pe.raw) - pe.overlay_offset
    if overlay_len <= 0:
        return GapVerdict(False, DETECTOR_OVERLAY)
    ratio = overlay_len / len(pe.raw)
    if ratio >= ratio_threshold:
        return GapVerdict(
            True, DETECTOR_OVERLAY,
            f"overlay {overlay_len} bytes of {len(pe.raw)} (ratio {ratio:.3f})")
    return GapVerdict(False, DETECTOR_OVERLAY)


def scan_duplicates(pe: PeFile) -> GapVerdict:
    """Flag two or more sections with identical raw content.

    Sections that are empty (no raw data, or raw data that is all zeros)
    are excluded; duplicated zero padding is normal.
    """
    seen = {}
    for i in range(len(pe.sections)):
        data = pe.section_data(i)
        if not data or data.count(0) == len(data):
            continue
        digest = hashlib.sha256(data).hexdigest()
        if digest in seen:
            return GapVerdict(
                True, DETECTOR_DUPLICATE,
                f"sections {seen[digest]} and {i} share identical "
                f"{len(data)}-byte content")
        seen[digest] = i
    return GapVerdict(False, DETECTOR_DUPLICATE)


def run_gap_detectors(pe: PeFile,
                      config: DetectorConfig = DetectorConfig()) -> List[GapVerdict]:
    """Run all three detectors; every verdict is returned for evidence."""
    return [
        scan_slack(pe, config.slack_nonzero_fraction),
        scan_overlay(pe, config.overlay_ratio),
        scan_duplicates(pe),
    ]
