"""Operator command line.

Batch work (extract/train/rules/evaluate/corpus/assemble) runs locally
against artifact files; ``serve`` hosts the black-box service; ``attack``
drives the red-team loop against either a remote service URL or a locally
loaded pipeline.  Usage errors exit 2 (argparse), runtime failures exit 1
with a diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np


def _cmd_extract(args) -> int:
    from .assemble import extract_matrix
    from .corpus import load_manifest
    from .features import append_dump_record, file_digest
    from .skipgrams import SkipgramConfig

    if args.manifest:
        entries = load_manifest(args.manifest)
        files = [(path.read_bytes(), label) for path, label in entries]
    else:
        files = [(Path(p).read_bytes(), None) for p in args.files]
    skip_cfg = SkipgramConfig(buckets=args.skipgram_buckets)
    matrix = extract_matrix([b for b, _ in files], args.variant, skip_cfg)
    labels = {"benign": 0, "malware": 1}
    with open(args.out, "w", encoding="utf-8") as fh:
        for (data, label), row in zip(files, matrix):
            append_dump_record(fh, file_digest(data), args.variant, row,
                               label=labels.get(label))
    print(f"wrote {len(files)} records ({matrix.shape[1]} features) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .features import load_dump
    from .gbdt import TrainConfig, save_model, train

    variant, _digests, labels, X = load_dump(args.data)
    if labels is None:
        print("error: dump has no labels; extract with --manifest",
              file=sys.stderr)
        return 1
    if variant != args.variant:
        print(f"error: dump holds variant {variant!r}, not {args.variant!r}",
              file=sys.stderr)
        return 1
    config = TrainConfig(num_trees=args.trees, max_depth=args.depth,
                         learning_rate=args.learning_rate,
                         min_samples_leaf=args.min_leaf,
                         histogram_bins=args.bins, seed=args.seed)
    if args.monotone == "auto":
        monotone = 1 if args.variant == "skipgram" else None
    elif args.monotone == "increasing":
        monotone = 1
    else:
        monotone = None
    ensemble = train(X, labels, config, monotone=monotone,
                     metadata={"variant": args.variant})
    save_model(ensemble, args.out)
    print(f"trained {args.variant} on {len(X)} samples "
          f"({len(ensemble.trees)} trees) -> {args.out}")
    return 0


def _cmd_rules_filter(args) -> int:
    from .corpus import read_corpus
    from .signatures import filter_rules, load_rules_file

    rules = load_rules_file(args.rules)
    ruleset = filter_rules(rules, read_corpus(args.corpus))
    ruleset.save(args.out)
    kept = [r.name for r in ruleset.rules]
    print(f"kept {len(kept)}/{len(rules)} rules -> {args.out}")
    for name in kept:
        stats = ruleset.provenance[name]
        print(f"  {name}: {stats['malware_matches']} malware, 0 benign")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .pipeline import Pipeline
    from .service import ServiceConfig, create_app

    pipeline = Pipeline.load(args.config)
    if args.state_persist:
        pipeline.buffer.log_path = args.state_persist
    config = ServiceConfig(host=args.host, port=args.port,
                           api_token=args.token, stats_enabled=args.stats)
    app = create_app(pipeline, config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
    return 0


def _cmd_evaluate(args) -> int:
    from .corpus import read_corpus
    from .pipeline import Pipeline, evaluate

    pipeline = Pipeline.load(args.config)
    report = evaluate(pipeline, read_corpus(args.manifest))
    print(report.format_table())
    return 0


def _cmd_attack(args) -> int:
    from .pipeline import Pipeline
    from .redteam import DEFAULT_ATTACK_POOL, AttackBudget, blackbox_attack

    if args.oracle_url:
        import httpx

        client = httpx.Client(base_url=args.oracle_url, timeout=30.0)

        def oracle(data: bytes) -> int:
            response = client.post("/predict", content=data)
            response.raise_for_status()
            return int(response.json()["result"])
    else:
        pipeline = Pipeline.load(args.oracle_local)

        def oracle(data: bytes) -> int:
            return pipeline.classify(data).result

    pool = tuple(args.pool.split(",")) if args.pool else DEFAULT_ATTACK_POOL
    budget = AttackBudget(max_queries=args.budget, pool=pool, seed=args.seed)
    donor = Path(args.donor).read_bytes() if args.donor else None
    outcome = blackbox_attack(oracle, Path(args.malware).read_bytes(),
                              budget, donor=donor)

    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            for step in outcome.log:
                fh.write(json.dumps(dataclasses.asdict(step)) + "\n")
            fh.write(json.dumps({"evaded": outcome.evaded,
                                 "queries_used": outcome.queries_used,
                                 "final_size": len(outcome.final_sample)}) + "\n")
    if args.out and outcome.evaded:
        Path(args.out).write_bytes(outcome.final_sample)
    print(f"evaded={outcome.evaded} queries_used={outcome.queries_used} "
          f"final_size={len(outcome.final_sample)}")
    return 0


def _cmd_corpus(args) -> int:
    from .corpus import generate_corpus, write_candidate_rules

    manifest = generate_corpus(args.out, args.benign, args.malware, args.seed)
    print(f"wrote corpus manifest {manifest}")
    if args.rules:
        path = write_candidate_rules(Path(args.out) / "candidate.rules")
        print(f"wrote candidate rules {path}")
    return 0


def _cmd_assemble(args) -> int:
    from .assemble import DeskBuildSettings, build_desk_pipeline
    from .pipeline import evaluate

    settings = DeskBuildSettings(n_benign=args.benign, n_malware=args.malware,
                                 seed=args.seed)
    build = build_desk_pipeline(args.workdir, settings)
    print(f"pipeline config: {build.config_path}")
    print("per-model thresholds:",
          {k: round(v, 5) for k, v in build.thresholds.items()})
    report = evaluate(build.pipeline, build.splits["test"])
    print(report.format_table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pedefense",
        description="Diversified static PE malware defense: train it, serve "
                    "it, evaluate it, attack it.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract feature dumps from PE files")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="corpus manifest.csv (path,label rows)")
    src.add_argument("--files", nargs="+", help="explicit PE files (no labels)")
    p.add_argument("--variant", required=True,
                   choices=["default", "v1", "v2", "v3", "skipgram"])
    p.add_argument("--out", required=True)
    p.add_argument("--skipgram-buckets", type=int, default=4096)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("train", help="train one model from a feature dump")
    p.add_argument("--variant", required=True,
                   choices=["default", "v1", "v2", "v3", "skipgram"])
    p.add_argument("--data", required=True, help="feature dump (jsonl)")
    p.add_argument("--out", required=True)
    p.add_argument("--trees", type=int, default=50)
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--learning-rate", type=float, default=0.15)
    p.add_argument("--min-leaf", type=int, default=15)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--monotone", choices=["auto", "none", "increasing"],
                   default="auto")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("rules", help="signature rule operations")
    rules_sub = p.add_subparsers(dest="rules_command", required=True)
    pf = rules_sub.add_parser("filter",
                              help="keep rules matching only malware")
    pf.add_argument("--rules", required=True, help="candidate rules file")
    pf.add_argument("--corpus", required=True, help="labeled manifest.csv")
    pf.add_argument("--out", required=True)
    pf.set_defaults(func=_cmd_rules_filter)

    p = sub.add_parser("serve", help="run the black-box classification service")
    p.add_argument("--config", required=True, help="pipeline.json")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--token", default=None, help="require this bearer token")
    p.add_argument("--stats", action="store_true", help="expose GET /stats")
    p.add_argument("--state-persist", default=None,
                   help="append-only fingerprint log path")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("evaluate", help="corpus metrics for a pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("attack", help="black-box evasion attack")
    oracle = p.add_mutually_exclusive_group(required=True)
    oracle.add_argument("--oracle-url", help="service base URL")
    oracle.add_argument("--oracle-local", help="pipeline.json to attack locally")
    p.add_argument("--malware", required=True, help="starting malware sample")
    p.add_argument("--pool", default=None,
                   help="comma-separated modification kinds")
    p.add_argument("--budget", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--donor", default=None, help="benign donor for mimicry")
    p.add_argument("--log", default=None, help="attack log (jsonl)")
    p.add_argument("--out", default=None, help="write evading sample here")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("corpus", help="generate the synthetic desk corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--benign", type=int, default=700)
    p.add_argument("--malware", type=int, default=700)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rules", action="store_true",
                   help="also write candidate rules")
    p.set_defaults(func=_cmd_corpus)

    p = sub.add_parser("assemble",
                       help="full desk build: corpus, models, calibration")
    p.add_argument("--workdir", required=True)
    p.add_argument("--benign", type=int, default=700)
    p.add_argument("--malware", type=int, default=700)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_assemble)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:   # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
