"""End-to-end desk build: generate, extract, train, calibrate, write config.

Produces every artifact a running pipeline needs inside one directory:

    workdir/
      corpus/            generated PE files + manifest.csv
      models/            one model file per ensemble slot
      candidate.rules    rule candidates before filtering
      ruleset.json       rules surviving malware-only filtering
      pipeline.json      the pipeline configuration

Per-model decision thresholds are calibrated on a validation split: each
threshold sits just above the highest benign validation score, which splits
the 1% false-positive budget conservatively across the voting components.
The stateful distance threshold is the 0.1th percentile of pairwise benign
fingerprint distances.  The v2/v3 slots share one feature configuration but
train on disjoint halves of the training split (the desk stand-in for the
two corpus years).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import corpus as corpus_mod
from .features import VARIANTS, extract_features
from .gbdt import TrainConfig, TreeEnsemble, predict, save_model, train
from .pe import MalformedPe, parse_pe
from .pipeline import ModelSlot, Pipeline, PipelineConfig, StatefulSettings
from .signatures import filter_rules, load_rules_file
from .skipgrams import SkipgramConfig, skipgram_vector_auto
from .stateful import calibrate_threshold, fingerprint

DESK_EMBER_TRAIN = TrainConfig(num_trees=50, max_depth=5, learning_rate=0.15,
                               min_samples_leaf=15, histogram_bins=64,
                               colsample=0.7)
DESK_SKIPGRAM_TRAIN = TrainConfig(num_trees=50, max_depth=4, learning_rate=0.15,
                                  min_samples_leaf=15, histogram_bins=16)
DESK_SKIPGRAM_FEATURES = SkipgramConfig(buckets=4096)

THRESHOLD_HEADROOM = 0.02
THRESHOLD_CAP = 0.9995


@dataclass
class DeskBuildSettings:
    n_benign: int = 700
    n_malware: int = 700
    seed: int = 0
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    ember_train: TrainConfig = field(default_factory=lambda: DESK_EMBER_TRAIN)
    skipgram_train: TrainConfig = field(default_factory=lambda: DESK_SKIPGRAM_TRAIN)
    skipgram_features: SkipgramConfig = DESK_SKIPGRAM_FEATURES
    stateful_percentile: float = 0.1


@dataclass
class DeskBuild:
    pipeline: Pipeline
    config_path: Path
    manifest_path: Path
    splits: Dict[str, List[Tuple[bytes, str]]]
    thresholds: Dict[str, float]
    val_tpr: Dict[str, float]


def split_samples(samples: Sequence[Tuple[bytes, str]], train_fraction: float,
                  val_fraction: float, seed: int) -> Dict[str, List[Tuple[bytes, str]]]:
    """Stratified deterministic train/val/test split."""
    rng = random.Random(seed ^ 0x5EED)
    by_label: Dict[str, list] = {"benign": [], "malware": []}
    for item in samples:
        by_label[item[1]].append(item)
    splits: Dict[str, List[Tuple[bytes, str]]] = {"train": [], "val": [], "test": []}
    for label_items in by_label.values():
        rng.shuffle(label_items)
        n = len(label_items)
        n_train = int(n * train_fraction)
        n_val = int(n * val_fraction)
        splits["train"] += label_items[:n_train]
        splits["val"] += label_items[n_train:n_train + n_val]
        splits["test"] += label_items[n_train + n_val:]
    for part in splits.values():
        rng.shuffle(part)
    return splits


def extract_matrix(samples: Sequence[bytes], variant: str,
                   skipgram_config: SkipgramConfig) -> np.ndarray:
    """Feature matrix for one variant name (``skipgram`` or a VARIANTS key)."""
    rows = []
    for data in samples:
        if variant == "skipgram":
            rows.append(skipgram_vector_auto(data, skipgram_config)
                        .astype(np.float64))
        else:
            try:
                parsed = parse_pe(data)
            except MalformedPe:
                parsed = None
            rows.append(extract_features(data, VARIANTS[variant], pe=parsed).values)
    return np.vstack(rows)


def calibrate_model_threshold(ensemble: TreeEnsemble, X_val: np.ndarray,
                              y_val: np.ndarray) -> Tuple[float, float]:
    """Threshold just above the worst benign validation score, plus val TPR."""
    probs = predict(ensemble, X_val)
    benign_max = float(probs[y_val == 0].max()) if (y_val == 0).any() else 0.5
    threshold = min(benign_max + THRESHOLD_HEADROOM, THRESHOLD_CAP)
    votes = probs >= threshold
    tpr = float(votes[y_val == 1].mean()) if (y_val == 1).any() else 0.0
    return threshold, tpr


def build_desk_pipeline(workdir,
                        settings: Optional[DeskBuildSettings] = None) -> DeskBuild:
    settings = settings or DeskBuildSettings()
    workdir = Path(workdir)
    corpus_dir = workdir / "corpus"
    models_dir = workdir / "models"
    models_dir.mkdir(parents=True, exist_ok=True)

    manifest = corpus_mod.generate_corpus(
        corpus_dir, settings.n_benign, settings.n_malware, seed=settings.seed)
    samples = [(path.read_bytes(), label)
               for path, label in corpus_mod.load_manifest(manifest)]
    splits = split_samples(samples, settings.train_fraction,
                           settings.val_fraction, settings.seed)

    train_bytes = [b for b, _ in splits["train"]]
    val_bytes = [b for b, _ in splits["val"]]
    y_train = np.array([1 if l == "malware" else 0 for _, l in splits["train"]])
    y_val = np.array([1 if l == "malware" else 0 for _, l in splits["val"]])

    thresholds: Dict[str, float] = {}
    val_tpr: Dict[str, float] = {}
    slots: Dict[str, ModelSlot] = {}

    matrix_cache: Dict[str, np.ndarray] = {}

    def matrices(variant: str) -> Tuple[np.ndarray, np.ndarray]:
        feat = "v2" if variant == "v3" else variant   # v2/v3 share features
        if feat not in matrix_cache:
            matrix_cache[feat] = extract_matrix(
                train_bytes + val_bytes, feat, settings.skipgram_features)
        full = matrix_cache[feat]
        return full[:len(train_bytes)], full[len(train_bytes):]

    for i, name in enumerate(("default", "v1", "v2", "v3", "skipgram")):
        X_train, X_val = matrices(name)
        if name == "skipgram":
            config = replace(settings.skipgram_train, seed=settings.seed + i)
            monotone = 1
        else:
            config = replace(settings.ember_train, seed=settings.seed + i)
            monotone = None
        rows = np.arange(len(X_train))
        if name == "v2":
            rows = rows[::2]
        elif name == "v3":
            rows = rows[1::2]
        ensemble = train(X_train[rows], y_train[rows], config, monotone=monotone,
                         metadata={"variant": name,
                                   "corpus_tag": ("2018" if name == "v3" else "2017")})
        threshold, tpr = calibrate_model_threshold(ensemble, X_val, y_val)
        path = models_dir / f"{name}.json"
        save_model(ensemble, path)
        slots[name] = ModelSlot(path=str(path.relative_to(workdir)),
                                threshold=threshold)
        thresholds[name] = threshold
        val_tpr[name] = tpr

    candidate_path = corpus_mod.write_candidate_rules(workdir / "candidate.rules")
    calib = splits["train"] + splits["val"]
    ruleset = filter_rules(load_rules_file(candidate_path), calib)
    ruleset_path = workdir / "ruleset.json"
    ruleset.save(ruleset_path)

    benign_train = [b for b, l in splits["train"] if l == "benign"][:250]
    malware_train = [b for b, l in splits["train"] if l == "malware"][:250]
    stateful_threshold = calibrate_threshold(
        [fingerprint(b) for b in benign_train],
        percentile=settings.stateful_percentile,
        malware_fingerprints=[fingerprint(b) for b in malware_train])

    config = PipelineConfig(
        models=slots,
        skipgram=settings.skipgram_features,
        ruleset_path="ruleset.json",
        stateful=StatefulSettings(threshold=stateful_threshold),
    )
    config_path = workdir / "pipeline.json"
    config.save(config_path)

    return DeskBuild(pipeline=Pipeline.load(config_path),
                     config_path=config_path,
                     manifest_path=manifest,
                     splits=splits,
                     thresholds=dict(thresholds, stateful=stateful_threshold),
                     val_tpr=val_tpr)
