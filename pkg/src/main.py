#!/usr/bin/env python3
"""
dcobench command line: offline pipeline (preprocess, build, train, groundtruth) and the
benchmark studies. Every command reads one JSON config; `--set section.key=value` overrides
single keys.

Exit codes: 0 success, 1 runtime error, 2 configuration error.
"""

import argparse
import json
import os
import sys

from artifacts import (
    ArtifactPaths,
    ArtifactSet,
    build_index,
    fit_preprocess,
    load_index,
    load_inputs,
    save_index,
    train_classifiers,
    write_truth,
)
from bench import (
    limited_data_study,
    measure_construction,
    measure_insertion,
    param_study,
    run_sweep,
    write_bench_csv,
    write_study_csv,
)
from config import load_config, phase_seeds
from core import ConfigError, Dataset
from db import ResultsStore
from manifest import RunManifest

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _context(args):
    cfg = load_config(args.config, args.overrides)
    paths = ArtifactPaths(cfg.output_dir)
    paths.ensure_dir()
    inputs = load_inputs(cfg)
    manifest = RunManifest(args.command, cfg.to_dict(), phase_seeds(cfg))
    manifest.add_fingerprint("base", inputs.base.fingerprint())
    manifest.add_fingerprint("queries", Dataset(inputs.queries).fingerprint())
    return cfg, paths, inputs, manifest


def _finish(manifest: RunManifest, paths: ArtifactPaths, records=None, study=None) -> str:
    manifest_path = manifest.write(paths.output_dir)
    if records is not None:
        store = ResultsStore(paths.results_db)
        store.add_run(
            manifest.run_id,
            manifest.command,
            manifest.started,
            os.path.basename(manifest_path),
            manifest.fingerprints.get("base"),
            manifest.seeds.get("root"),
        )
        store.add_records(manifest.run_id, study or manifest.command, records)
    return manifest_path


def cmd_preprocess(args) -> int:
    cfg, paths, inputs, manifest = _context(args)
    arts = fit_preprocess(cfg, inputs.base, paths)
    arts.save_preprocess()
    for path in (paths.pca, paths.ortho, paths.dade_eps, paths.pq):
        if os.path.exists(path):
            manifest.add_output(path)
    _finish(manifest, paths)
    return EXIT_OK


def cmd_build(args) -> int:
    cfg, paths, inputs, manifest = _context(args)
    arts = ArtifactSet.load(paths)
    idx = build_index(cfg, inputs.base, arts)
    if idx.kind == "hnsw":
        audit = idx.audit()
        if not audit["ok"]:
            raise RuntimeError(f"HNSW audit failed: {audit['problems'][:5]}")
        print(f"📊 HNSW audit ok, {audit['reachable_fraction']:.2%} of layer 0 reachable")
    manifest.add_output(save_index(idx, paths))
    _finish(manifest, paths)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, paths, inputs, manifest = _context(args)
    arts = ArtifactSet.load(paths)
    idx = load_index(cfg, paths, inputs.base)
    trained = train_classifiers(cfg, inputs.base, idx, arts)
    for kind in trained:
        manifest.add_output(paths.models[kind][0])
        manifest.add_output(paths.models[kind][1])
        if cfg.train.get("dump_samples"):
            manifest.add_output(paths.samples_csv(kind))
    _finish(manifest, paths)
    return EXIT_OK


def cmd_groundtruth(args) -> int:
    cfg, paths, inputs, manifest = _context(args)
    manifest.add_output(write_truth(inputs, paths, max(cfg.ks)))
    _finish(manifest, paths)
    return EXIT_OK


def _csv_path(paths: ArtifactPaths, prefix: str, manifest: RunManifest) -> str:
    return os.path.join(paths.output_dir, f"{prefix}_{manifest.run_id}.csv")


def cmd_bench(args) -> int:
    cfg, paths, inputs, manifest = _context(args)
    arts = ArtifactSet.load(paths)
    idx = load_index(cfg, paths, inputs.base)
    records = run_sweep(cfg, inputs, idx, arts)
    csv_path = _csv_path(paths, "bench", manifest)
    write_bench_csv(records, csv_path)
    manifest.add_output(csv_path)
    _finish(manifest, paths, records, "sweep")
    return EXIT_OK


def cmd_construction_bench(args) -> int:
    cfg, paths, inputs, manifest = _context(args)
    arts = ArtifactSet.load(paths)
    records, deltas = measure_construction(cfg, inputs, arts)
    csv_path = _csv_path(paths, "construction", manifest)
    write_study_csv(records, csv_path)
    deltas_path = os.path.join(paths.output_dir, f"construction_deltas_{manifest.run_id}.json")
    with open(deltas_path, "w") as f:
        json.dump({str(k): v for k, v in deltas.items()}, f, indent=2)
    manifest.add_output(csv_path)
    manifest.add_output(deltas_path)
    _finish(manifest, paths, records, "construction")
    return EXIT_OK


def cmd_insert_bench(args) -> int:
    cfg, paths, inputs, manifest = _context(args)
    records = measure_insertion(cfg, inputs, paths)
    csv_path = _csv_path(paths, "insertion", manifest)
    write_study_csv(records, csv_path)
    manifest.add_output(csv_path)
    _finish(manifest, paths, records, "insertion")
    return EXIT_OK


def cmd_limited_data(args) -> int:
    cfg, paths, inputs, manifest = _context(args)
    idx = load_index(cfg, paths, inputs.base)
    records = limited_data_study(cfg, inputs, idx, paths=paths)
    csv_path = _csv_path(paths, "limited", manifest)
    write_study_csv(records, csv_path)
    manifest.add_output(csv_path)
    _finish(manifest, paths, records, "limited-data")
    return EXIT_OK


def cmd_param_study(args) -> int:
    cfg, paths, inputs, manifest = _context(args)
    arts = ArtifactSet.load(paths)
    idx = load_index(cfg, paths, inputs.base)
    records = param_study(cfg, inputs, idx, arts)
    csv_path = _csv_path(paths, "params", manifest)
    write_study_csv(records, csv_path)
    manifest.add_output(csv_path)
    _finish(manifest, paths, records, "param-study")
    return EXIT_OK


COMMANDS = {
    "preprocess": (cmd_preprocess, "Fit PCA, random projection, DADE eps and the PQ codebook"),
    "build": (cmd_build, "Build the configured HNSW or IVF index"),
    "train": (cmd_train, "Generate samples on the built index and fit DDCpca / DDCopq models"),
    "groundtruth": (cmd_groundtruth, "Brute-force ground truth for the query set"),
    "bench": (cmd_bench, "QPS-recall sweep over the configured grid"),
    "construction-bench": (cmd_construction_bench, "HNSW build time per DCO strategy and recall deltas"),
    "insert-bench": (cmd_insert_bench, "Build on the base fraction, insert the rest in batches"),
    "limited-data": (cmd_limited_data, "Fit preprocessing and models on fractions of the base set"),
    "param-study": (cmd_param_study, "Sweep the scan schedule parameters delta0 and delta_d"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config key (repeatable)",
    )
    parser = argparse.ArgumentParser(prog="dcobench", description="Distance comparison operation benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        print(f"❌ {args.command} failed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
