"""Diversified static defense pipeline for Windows PE malware detection.

Layered components: semantic-gap detectors, an ensemble of hardened
feature-variant boosted-tree models plus a monotone skipgram model and a
signature engine, and a stateful query monitor -- served over a binary
black-box API, with a red-team harness to attack the whole thing.
"""

from .detectors import GapVerdict, run_gap_detectors, scan_duplicates, scan_overlay, scan_slack
from .features import FeatureVector, VariantConfig, VARIANTS, extract_features
from .gbdt import TrainConfig, TreeEnsemble, load_model, predict, save_model, train
from .pe import MalformedPe, PeFile, parse_pe, serialize_pe
from .pipeline import Pipeline, PipelineConfig, Verdict, evaluate, evasion_rate
from .redteam import AttackBudget, Modification, apply, blackbox_attack, mimicry_payload
from .signatures import Rule, RuleSet, filter_rules, match_rule, parse_rules
from .skipgrams import SkipgramConfig, enumerate_skipgrams, skipgram_vector
from .stateful import Fingerprint, HistoryBuffer, fingerprint

__version__ = "0.1.0"

__all__ = [
    "AttackBudget", "FeatureVector", "Fingerprint", "GapVerdict",
    "HistoryBuffer", "MalformedPe", "Modification", "PeFile", "Pipeline",
    "PipelineConfig", "Rule", "RuleSet", "SkipgramConfig", "TrainConfig",
    "TreeEnsemble", "VARIANTS", "VariantConfig", "Verdict", "apply",
    "blackbox_attack", "enumerate_skipgrams", "evaluate", "evasion_rate",
    "extract_features", "filter_rules", "fingerprint", "load_model",
    "match_rule", "mimicry_payload", "parse_pe", "parse_rules", "predict",
    "run_gap_detectors", "save_model", "scan_duplicates", "scan_overlay",
    "scan_slack", "serialize_pe", "skipgram_vector", "train",
]
