"""The full decision procedure: detectors, model ensemble, stateful check.

Order per query: parse (malformed input follows the configured policy,
fail-closed by default), the three semantic-gap detectors (any flag decides
malware immediately), then the classifier ensemble -- four feature-variant
models, the monotone skipgram model, and the signature scan -- combined by
max voting (logical OR over per-component votes), and finally the stateful
nearest-neighbor check.  A soft time budget skips remaining ensemble
components rather than ever missing the service deadline.
"""

from __future__ import annotations

import json
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import pe as pefmt
from .detectors import DetectorConfig, run_gap_detectors
from .features import VARIANTS, extract_features
from .gbdt import TreeEnsemble, load_model, predict_one
from .signatures import RuleSet
from .skipgrams import SkipgramConfig, skipgram_vector_auto
from .stateful import (
    DEFAULT_CAPACITY,
    DEFAULT_DISTANCE_THRESHOLD,
    EmptyInput,
    HistoryBuffer,
    fingerprint,
)

MODEL_ORDER = ("default", "v1", "v2", "v3", "skipgram")


class EmptySet(ValueError):
    """Evasion rate over zero validated samples is undefined."""


@dataclass
class ModelSlot:
    path: str
    threshold: float
    enabled: bool = True


@dataclass
class StatefulSettings:
    enabled: bool = True
    capacity: int = DEFAULT_CAPACITY
    threshold: float = DEFAULT_DISTANCE_THRESHOLD
    persist_path: Optional[str] = None
    store_on_detector_hit: bool = True
    store_on_stateful_hit: bool = True


@dataclass
class PipelineConfig:
    models: Dict[str, ModelSlot] = field(default_factory=dict)
    detectors_enabled: bool = True
    slack_threshold: float = 0.05
    overlay_threshold: float = 0.25
    skipgram: SkipgramConfig = field(default_factory=SkipgramConfig)
    signatures_enabled: bool = True
    ruleset_path: Optional[str] = None
    stateful: StatefulSettings = field(default_factory=StatefulSettings)
    malformed_policy: str = "malware"          # or "benign"
    soft_budget_seconds: float = 3.0

    def __post_init__(self):
        if self.malformed_policy not in ("malware", "benign"):
            raise ValueError("malformed_policy must be 'malware' or 'benign'")
        for name in self.models:
            if name not in MODEL_ORDER:
                raise ValueError(f"unknown model slot {name!r}")
        for slot in self.models.values():
            if not 0 < slot.threshold < 1:
                raise ValueError("model thresholds must lie in (0, 1)")

    def to_dict(self) -> Dict:
        return {
            "format": "pedefense-pipeline",
            "version": 1,
            "detectors": {"enabled": self.detectors_enabled,
                          "slack_threshold": self.slack_threshold,
                          "overlay_threshold": self.overlay_threshold},
            "models": {name: {"path": slot.path, "threshold": slot.threshold,
                              "enabled": slot.enabled}
                       for name, slot in self.models.items()},
            "skipgram_features": {"n": self.skipgram.n, "k": self.skipgram.k,
                                  "buckets": self.skipgram.buckets,
                                  "work_bound": self.skipgram.work_bound},
            "signatures": {"enabled": self.signatures_enabled,
                           "ruleset": self.ruleset_path},
            "stateful": {"enabled": self.stateful.enabled,
                         "capacity": self.stateful.capacity,
                         "threshold": self.stateful.threshold,
                         "persist": self.stateful.persist_path,
                         "store_on_detector_hit": self.stateful.store_on_detector_hit,
                         "store_on_stateful_hit": self.stateful.store_on_stateful_hit},
            "malformed_policy": self.malformed_policy,
            "soft_budget_seconds": self.soft_budget_seconds,
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "PipelineConfig":
        if payload.get("format") != "pedefense-pipeline":
            raise ValueError("not a pipeline config")
        if payload.get("version") != 1:
            raise ValueError(f"unsupported pipeline config version "
                             f"{payload.get('version')}")
        det = payload.get("detectors", {})
        sk = payload.get("skipgram_features", {})
        sig = payload.get("signatures", {})
        st = payload.get("stateful", {})
        return cls(
            models={name: ModelSlot(path=m["path"], threshold=m["threshold"],
                                    enabled=m.get("enabled", True))
                    for name, m in payload.get("models", {}).items()},
            detectors_enabled=det.get("enabled", True),
            slack_threshold=det.get("slack_threshold", 0.05),
            overlay_threshold=det.get("overlay_threshold", 0.25),
            skipgram=SkipgramConfig(
                n=sk.get("n", 3), k=sk.get("k", 3),
                buckets=sk.get("buckets", SkipgramConfig().buckets),
                work_bound=sk.get("work_bound", SkipgramConfig().work_bound)),
            signatures_enabled=sig.get("enabled", True),
            ruleset_path=sig.get("ruleset"),
            stateful=StatefulSettings(
                enabled=st.get("enabled", True),
                capacity=st.get("capacity", DEFAULT_CAPACITY),
                threshold=st.get("threshold", DEFAULT_DISTANCE_THRESHOLD),
                persist_path=st.get("persist"),
                store_on_detector_hit=st.get("store_on_detector_hit", True),
                store_on_stateful_hit=st.get("store_on_stateful_hit", True)),
            malformed_policy=payload.get("malformed_policy", "malware"),
            soft_budget_seconds=payload.get("soft_budget_seconds", 3.0),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Verdict:
    label: str                         # "malware" | "benign"
    sources: Tuple[str, ...]
    scores: Dict[str, float] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    skipped: Tuple[str, ...] = ()
    stateful_distance: Optional[float] = None

    @property
    def is_malware(self) -> bool:
        return self.label == "malware"

    @property
    def result(self) -> int:
        return 1 if self.is_malware else 0


class Pipeline:
    """Loaded artifacts plus the single mutable history buffer."""

    def __init__(self, config: PipelineConfig,
                 ensembles: Dict[str, TreeEnsemble],
                 ruleset: Optional[RuleSet] = None,
                 buffer: Optional[HistoryBuffer] = None):
        self.config = config
        self.ensembles = ensembles
        self.ruleset = ruleset
        self.buffer = buffer or HistoryBuffer(
            capacity=config.stateful.capacity,
            threshold=config.stateful.threshold,
            log_path=config.stateful.persist_path)
        self.detector_config = DetectorConfig(
            slack_nonzero_fraction=config.slack_threshold,
            overlay_ratio=config.overlay_threshold)
        for name, slot in config.models.items():
            if slot.enabled and name not in ensembles:
                raise ValueError(f"enabled model {name!r} was not loaded")

    @classmethod
    def load(cls, config_path) -> "Pipeline":
        """Load a config file; artifact paths resolve against its directory."""
        config_path = Path(config_path)
        config = PipelineConfig.load(config_path)
        base = config_path.parent

        def _resolve(p):
            p = Path(p)
            return p if p.is_absolute() else base / p

        ensembles = {}
        for name, slot in config.models.items():
            if slot.enabled:
                ensembles[name] = load_model(_resolve(slot.path))
        ruleset = None
        if config.signatures_enabled and config.ruleset_path:
            ruleset = RuleSet.load(_resolve(config.ruleset_path))
        if config.stateful.persist_path:
            config = replace(config, stateful=replace(
                config.stateful,
                persist_path=str(_resolve(config.stateful.persist_path))))
        return cls(config, ensembles, ruleset)

    # ------------------------------------------------------------------

    def _store_fingerprint(self, data: bytes, stateful_on: bool) -> None:
        if not (stateful_on and self.config.stateful.store_on_detector_hit):
            return
        try:
            self.buffer.add(fingerprint(data))
        except EmptyInput:
            pass

    def _model_score(self, name: str, data: bytes,
                     pe: Optional[pefmt.PeFile]) -> float:
        ensemble = self.ensembles[name]
        if name == "skipgram":
            vector = skipgram_vector_auto(data, self.config.skipgram)
            return predict_one(ensemble, vector.astype(np.float64))
        fv = extract_features(data, VARIANTS[name], pe=pe)
        return predict_one(ensemble, fv.values)

    def classify(self, data: bytes,
                 use_stateful: Optional[bool] = None) -> Verdict:
        """Classify one input; never raises on hostile bytes.

        ``use_stateful`` overrides the configured stateful toggle (corpus
        evaluation disables it: independent files are not a query sequence).
        """
        t_start = time.perf_counter()
        cfg = self.config
        stateful_on = (cfg.stateful.enabled if use_stateful is None
                       else use_stateful)
        timings: Dict[str, float] = {}
        scores: Dict[str, float] = {}
        sources: List[str] = []
        skipped: List[str] = []

        t0 = time.perf_counter()
        parsed: Optional[pefmt.PeFile] = None
        try:
            parsed = pefmt.parse_pe(data)
        except pefmt.MalformedPe:
            pass
        timings["parse"] = time.perf_counter() - t0

        if parsed is None:
            if cfg.malformed_policy == "malware":
                self._store_fingerprint(data, stateful_on)
                timings["total"] = time.perf_counter() - t_start
                return Verdict("malware", ("parse",), scores, timings)
            timings["total"] = time.perf_counter() - t_start
            return Verdict("benign", (), scores, timings)

        if cfg.detectors_enabled:
            t0 = time.perf_counter()
            verdicts = run_gap_detectors(parsed, self.detector_config)
            timings["detectors"] = time.perf_counter() - t0
            flagged = [v for v in verdicts if v.flagged]
            if flagged:
                self._store_fingerprint(data, stateful_on)
                timings["total"] = time.perf_counter() - t_start
                return Verdict("malware",
                               tuple(f"detector:{v.detector}" for v in flagged),
                               scores, timings)

        budget = cfg.soft_budget_seconds
        over_budget = False
        for name in MODEL_ORDER:
            slot = cfg.models.get(name)
            if slot is None or not slot.enabled:
                continue
            if time.perf_counter() - t_start > budget:
                over_budget = True
            if over_budget:
                skipped.append(f"model:{name}")
                continue
            t0 = time.perf_counter()
            prob = self._model_score(name, data, parsed)
            timings[f"model:{name}"] = time.perf_counter() - t0
            scores[name] = prob
            if prob >= slot.threshold:
                sources.append(f"model:{name}")

        if cfg.signatures_enabled and self.ruleset is not None:
            if over_budget or time.perf_counter() - t_start > budget:
                skipped.append("signatures")
            else:
                t0 = time.perf_counter()
                matched = self.ruleset.scan(data)
                timings["signatures"] = time.perf_counter() - t0
                sources.extend(f"signature:{name}" for name in matched)

        ensemble_verdict = "malware" if sources else "benign"
        distance = None
        if stateful_on:
            t0 = time.perf_counter()
            try:
                fp = fingerprint(data)
            except EmptyInput:
                fp = None
            if fp is not None:
                decision = self.buffer.check_and_update(
                    fp, ensemble_verdict,
                    store_on_hit=cfg.stateful.store_on_stateful_hit)
                distance = decision.distance
                if decision.stateful_hit:
                    sources.append("stateful")
                timings["stateful"] = time.perf_counter() - t0
                timings["total"] = time.perf_counter() - t_start
                return Verdict(decision.final_verdict, tuple(sources), scores,
                               timings, tuple(skipped), distance)

        timings["total"] = time.perf_counter() - t_start
        return Verdict(ensemble_verdict, tuple(sources), scores, timings,
                       tuple(skipped), distance)


@dataclass
class EvalReport:
    n_benign: int
    n_malware: int
    true_positives: int
    false_positives: int
    attribution: Dict[str, int]
    latency_p50_s: float
    latency_p99_s: float

    @property
    def tpr(self) -> float:
        return self.true_positives / self.n_malware if self.n_malware else 0.0

    @property
    def fpr(self) -> float:
        return self.false_positives / self.n_benign if self.n_benign else 0.0

    def format_table(self) -> str:
        lines = [
            f"{'samples':<22} {self.n_benign} benign / {self.n_malware} malware",
            f"{'true positive rate':<22} {self.tpr:.4f}",
            f"{'false positive rate':<22} {self.fpr:.4f}",
            f"{'latency p50':<22} {self.latency_p50_s * 1000:.1f} ms",
            f"{'latency p99':<22} {self.latency_p99_s * 1000:.1f} ms",
            "attribution (malware verdicts, all firing sources):",
        ]
        for source, count in sorted(self.attribution.items(),
                                    key=lambda kv: -kv[1]):
            lines.append(f"  {source:<28} {count}")
        return "\n".join(lines)


def evaluate(pipeline: Pipeline,
             samples: Iterable[Tuple[bytes, str]]) -> EvalReport:
    """Corpus metrics with the stateful defense disabled.

    Evaluation queries are independent files, not an attack sequence, so
    the history-buffer check stays out of the measured operating point.
    """
    attribution: Counter = Counter()
    latencies: List[float] = []
    n_benign = n_malware = tp = fp = 0
    for data, label in samples:
        verdict = pipeline.classify(data, use_stateful=False)
        latencies.append(verdict.timings["total"])
        if label == "malware":
            n_malware += 1
            if verdict.is_malware:
                tp += 1
        elif label == "benign":
            n_benign += 1
            if verdict.is_malware:
                fp += 1
        else:
            raise ValueError(f"bad label {label!r}")
        if verdict.is_malware:
            attribution.update(verdict.sources)
    if not latencies:
        raise ValueError("empty evaluation corpus")
    lat = np.asarray(latencies)
    return EvalReport(
        n_benign=n_benign, n_malware=n_malware,
        true_positives=tp, false_positives=fp,
        attribution=dict(attribution),
        latency_p50_s=float(np.percentile(lat, 50)),
        latency_p99_s=float(np.percentile(lat, 99)))


def evasion_rate(evaded_flags: Iterable[bool]) -> float:
    """Fraction of validated attack samples that evaded a defense."""
    flags = list(evaded_flags)
    if not flags:
        raise EmptySet("no validated samples")
    return sum(bool(f) for f in flags) / len(flags)
