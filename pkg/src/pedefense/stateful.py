"""Stateful query monitor: nearest-neighbor check over past malware queries.

Every input the system classifies as malware is fingerprinted and stored in
a bounded FIFO history buffer.  A later query whose L1 distance to any
stored fingerprint falls below a threshold is treated as part of an
iterative evasion attempt and classified malware, no matter what the
ensemble said.  Benign queries are never stored: a benign sample sitting in
the buffer could turn future legitimate lookalikes into false positives.

The fingerprint is the byte histogram concatenated with the byte-entropy
histogram, computed on the full untruncated file, so overlay- and
slack-resident payload changes move the fingerprint too.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .features import byte_entropy_histogram, byte_histogram

FINGERPRINT_DIM = 512
DEFAULT_CAPACITY = 10_000

# Calibrated on the benign desk corpus: the 0.1th percentile of pairwise
# benign fingerprint distances, capped by the cross-class guard in
# calibrate_threshold.  Pipeline builds recalibrate on their own corpus.
DEFAULT_DISTANCE_THRESHOLD = 0.25

INFINITE_DISTANCE = float("inf")


class EmptyInput(ValueError):
    """Cannot fingerprint an empty byte sequence."""


@dataclass(frozen=True)
class Fingerprint:
    values: np.ndarray
    file_digest: str
    timestamp: float


@dataclass
class StatefulDecision:
    final_verdict: str           # "malware" | "benign"
    stateful_hit: bool
    distance: float
    matched_digest: Optional[str]
    stored: bool


def fingerprint(data: bytes) -> Fingerprint:
    """512-value histogram fingerprint of the full, untruncated bytes."""
    if not data:
        raise EmptyInput("cannot fingerprint empty input")
    values = np.concatenate([byte_histogram(data), byte_entropy_histogram(data)])
    return Fingerprint(values=values,
                       file_digest=hashlib.sha256(data).hexdigest(),
                       timestamp=time.time())


class HistoryBuffer:
    """Bounded FIFO of fingerprints with exhaustive L1 nearest-neighbor lookup.

    The check-then-insert step for one query is atomic with respect to other
    queries; this is the single stateful component of the pipeline.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY,
                 threshold: float = DEFAULT_DISTANCE_THRESHOLD,
                 log_path=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if threshold < 0:
            raise ValueError("threshold must be >= 0")
        self.capacity = capacity
        self.threshold = threshold
        self.log_path = log_path
        self._lock = threading.Lock()
        self._matrix = np.zeros((capacity, FINGERPRINT_DIM), dtype=np.float64)
        self._digests: List[str] = []
        self._next = 0
        self._count = 0
        if log_path is not None:
            self._replay_log(log_path)

    def __len__(self) -> int:
        return self._count

    @property
    def digests(self) -> List[str]:
        """Stored digests in insertion order (oldest first)."""
        with self._lock:
            if self._count < self.capacity:
                return list(self._digests[:self._count])
            return (self._digests[self._next:] + self._digests[:self._next])

    def _insert_locked(self, fp: Fingerprint, log: bool = True) -> None:
        row = self._next
        self._matrix[row] = fp.values
        if row < len(self._digests):
            self._digests[row] = fp.file_digest
        else:
            self._digests.append(fp.file_digest)
        self._next = (self._next + 1) % self.capacity
        self._count = min(self._count + 1, self.capacity)
        if log and self.log_path is not None:
            record = {"digest": fp.file_digest, "timestamp": fp.timestamp,
                      "values": fp.values.tolist()}
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")

    def _nearest_locked(self, fp: Fingerprint) -> Tuple[float, Optional[str]]:
        if self._count == 0:
            return INFINITE_DISTANCE, None
        stored = self._matrix[:self._count]
        dists = np.abs(stored - fp.values).sum(axis=1)
        best = int(np.argmin(dists))
        return float(dists[best]), self._digests[best]

    def nearest_distance(self, fp: Fingerprint) -> Tuple[float, Optional[str]]:
        """Min L1 distance to the buffer and the matching digest.

        Returns ``(inf, None)`` for an empty buffer.
        """
        with self._lock:
            return self._nearest_locked(fp)

    def add(self, fp: Fingerprint) -> None:
        with self._lock:
            self._insert_locked(fp)

    def check_and_update(self, fp: Fingerprint, ensemble_verdict: str,
                         store_on_hit: bool = True) -> StatefulDecision:
        """Apply the stateful policy for one query, atomically.

        A malware ensemble verdict is stored and passed through.  A benign
        verdict is flipped to malware when the nearest stored fingerprint is
        closer than the threshold; flipped queries are themselves stored
        (they were finally classified malware) unless ``store_on_hit`` is
        disabled.
        """
        if ensemble_verdict not in ("malware", "benign"):
            raise ValueError(f"bad ensemble verdict {ensemble_verdict!r}")
        with self._lock:
            distance, match = self._nearest_locked(fp)
            if ensemble_verdict == "malware":
                self._insert_locked(fp)
                return StatefulDecision("malware", False, distance, match, True)
            if distance < self.threshold:
                stored = False
                if store_on_hit:
                    self._insert_locked(fp)
                    stored = True
                return StatefulDecision("malware", True, distance, match, stored)
            return StatefulDecision("benign", False, distance, match, False)

    def _replay_log(self, log_path) -> None:
        try:
            fh = open(log_path, "r", encoding="utf-8")
        except FileNotFoundError:
            return
        with fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                fp = Fingerprint(
                    values=np.asarray(record["values"], dtype=np.float64),
                    file_digest=record["digest"],
                    timestamp=float(record["timestamp"]))
                self._insert_locked(fp, log=False)


def nearest_distance(buffer: HistoryBuffer,
                     fp: Fingerprint) -> Tuple[float, Optional[str]]:
    return buffer.nearest_distance(fp)


def check_and_update(buffer: HistoryBuffer, fp: Fingerprint,
                     ensemble_verdict: str,
                     store_on_hit: bool = True) -> StatefulDecision:
    return buffer.check_and_update(fp, ensemble_verdict, store_on_hit)


def calibrate_threshold(fingerprints: List[Fingerprint],
                        percentile: float = 0.1,
                        malware_fingerprints: Optional[List[Fingerprint]] = None,
                        cross_safety: float = 0.5) -> float:
    """Distance threshold from pairwise fingerprint distances.

    Base rule: the given percentile (default the 0.1th) of all pairwise L1
    distances among the provided benign fingerprints, so unrelated files
    virtually never collide.  When malware fingerprints are supplied the
    threshold is additionally capped at ``cross_safety`` times the closest
    benign-to-malware distance: the buffer holds malware fingerprints, so a
    benign file must never sit within threshold of one.  Iterative-attack
    resubmissions land orders of magnitude below either bound.
    """
    if len(fingerprints) < 2:
        return DEFAULT_DISTANCE_THRESHOLD
    from scipy.spatial.distance import cdist, pdist
    matrix = np.stack([fp.values for fp in fingerprints])
    threshold = float(np.percentile(pdist(matrix, metric="cityblock"), percentile))
    if malware_fingerprints:
        mal = np.stack([fp.values for fp in malware_fingerprints])
        cross_min = float(cdist(matrix, mal, metric="cityblock").min())
        threshold = min(threshold, cross_safety * cross_min)
    return threshold
