import csv
import json
import time

import numpy as np
import pytest

import bench
from artifacts import ArtifactPaths, build_index, fit_preprocess, load_inputs
from bench import (
    BENCH_FIELDS,
    SKIPPED,
    BenchRecord,
    batch_boundaries,
    check_recall_monotone,
    evaluate,
    limited_data_study,
    measure_construction,
    measure_insertion,
    param_study,
    run_sweep,
    write_bench_csv,
    write_study_csv,
)
from config import load_config
from core import ConfigError, Dataset, ground_truth
from dco import FD_SCANNING, make_strategy
from hnsw import HnswIndex

SMALL = {
    "strategies": ["FDScanning", "PDScanning"],
    "ks": [5],
    "dataset": {"synthetic": {"n": 300, "dim": 16}, "n_queries": 10},
    "hnsw": {"M": 8, "ef_construction": 40, "ef_search": [10, 40], "default_ef_search": 40},
    "dco": {"delta0": 8, "delta_d": 8, "dade_pairs": 2000},
    "pq": {"b": 4},
    "bench": {"repetitions": 1, "warmup_queries": 2, "limited_fractions": [0.1, 1.0],
              "delta0_grid": [4, 8], "delta_d_grid": [8], "insert_batches": 2, "base_fraction": 0.6},
}


def _setup(tmp_path, overrides=()):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL))
    cfg = load_config(str(path), list(overrides), env={})
    paths = ArtifactPaths(str(tmp_path))
    inputs = load_inputs(cfg)
    arts = fit_preprocess(cfg, inputs.base, paths)
    return cfg, inputs, arts


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_bench_record_validation_and_row():
    with pytest.raises(ValueError):
        BenchRecord("FDScanning", "hnsw", 10, "ef_search", 100, recall=1.5)
    with pytest.raises(ValueError):
        BenchRecord("FDScanning", "hnsw", 10, "ef_search", 100, scan_fraction=-0.1)
    rec = BenchRecord("PDScanning", "ivf", 20, "nprobe", 8, recall=0.5, qps_query=float("inf"))
    row = dict(zip(BENCH_FIELDS, rec.to_row()))
    assert row["index"] == "ivf"
    assert row["recall"] == "0.5"
    assert row["qps_query"] == "inf"
    assert row["scan_fraction"] == ""


def test_csv_writers(tmp_path):
    records = [
        BenchRecord("FDScanning", "hnsw", 10, "ef_search", 100, recall=1.0, extra={"batch": 1}),
        BenchRecord.skipped("DDCopq", "hnsw", 10, "fraction", 0.01, "too small"),
    ]
    bench_path = str(tmp_path / "bench.csv")
    assert write_bench_csv(records, bench_path) == 1
    rows = _rows(bench_path)
    assert rows[0] == BENCH_FIELDS
    assert len(rows) == 2
    study_path = str(tmp_path / "study.csv")
    write_study_csv(records, study_path)
    rows = _rows(study_path)
    assert rows[0] == BENCH_FIELDS + ["status", "batch", "reason"]
    assert rows[2][len(BENCH_FIELDS)] == SKIPPED
    assert rows[2][-1] == "too small"


def test_batch_boundaries():
    assert batch_boundaries(1000, 0.6, 4) == [600, 700, 800, 900, 1000]
    assert batch_boundaries(10, 0.5, 1) == [5, 10]
    with pytest.raises(ConfigError):
        batch_boundaries(10, 1.0, 2)
    with pytest.raises(ConfigError):
        batch_boundaries(10, 0.5, 0)


def test_recall_monotone_check():
    recs = [BenchRecord("FDScanning", "hnsw", 10, "ef_search", v, recall=r) for v, r in ((10, 0.5), (20, 0.7), (40, 0.6))]
    assert check_recall_monotone(recs) == 1
    assert check_recall_monotone(recs[:2]) == 0
    shrinking = [BenchRecord("PDScanning", "hnsw", 10, "n_vectors", n, recall=r) for n, r in ((100, 0.9), (200, 0.895))]
    assert check_recall_monotone(shrinking, "PDScanning", increasing=False) == 0


def test_sweep_records_each_grid_point(tmp_path):
    cfg, inputs, arts = _setup(tmp_path)
    idx = build_index(cfg, inputs.base, arts)
    records = run_sweep(cfg, inputs, idx, arts)
    assert [(r.strategy, r.sweep_value) for r in records] == [
        ("FDScanning", 10), ("FDScanning", 40), ("PDScanning", 10), ("PDScanning", 40),
    ]
    by_key = {(r.strategy, r.sweep_value): r for r in records}
    for value in (10, 40):
        fd, pd = by_key[("FDScanning", value)], by_key[("PDScanning", value)]
        assert fd.scan_fraction == 1.0
        assert pd.scan_fraction <= 1.0
        assert fd.recall == pd.recall
        assert fd.dco_count == pd.dco_count
        assert fd.extra["spot_mismatches"] == 0
    assert by_key[("FDScanning", 40)].recall >= 0.8


def test_limited_data_skips_classifiers_below_floor(tmp_path):
    cfg, inputs, arts = _setup(tmp_path, ["strategies=[\"FDScanning\", \"DDCpca\"]"])
    idx = build_index(cfg, inputs.base, arts)
    records = limited_data_study(cfg, inputs, idx)
    fd = [r for r in records if r.strategy == "FDScanning"]
    ddc = [r for r in records if r.strategy == "DDCpca"]
    assert [r.sweep_value for r in fd] == [0.1, 1.0]
    assert all(r.status == SKIPPED and "required" in r.extra["reason"] for r in ddc)
    assert len(ddc) == 2
    assert fd[0].extra["fit_vectors"] == 30


def test_param_study_grid(tmp_path):
    cfg, inputs, arts = _setup(tmp_path, ["strategies=[\"PDScanning\", \"DDCres\"]"])
    idx = build_index(cfg, inputs.base, arts)
    records = param_study(cfg, inputs, idx, arts)
    assert [(r.sweep_param, r.sweep_value, r.strategy) for r in records] == [
        ("delta0", 4, "PDScanning"), ("delta0", 4, "DDCres"),
        ("delta0", 8, "PDScanning"), ("delta0", 8, "DDCres"),
        ("delta_d", 8, "PDScanning"), ("delta_d", 8, "DDCres"),
    ]
    pd = [r.recall for r in records if r.strategy == "PDScanning"]
    assert len(set(pd)) == 1


def test_construction_with_pd_matches_fd(tmp_path):
    cfg, inputs, arts = _setup(tmp_path)
    records, deltas = measure_construction(cfg, inputs, arts)
    assert [r.strategy for r in records] == ["FDScanning", "PDScanning"]
    assert deltas[5]["PDScanning"]["FDScanning"] == 0.0
    pd = records[1]
    assert pd.extra["build_scan_fraction"] < records[0].extra["build_scan_fraction"] == 1.0


def test_construction_rejects_bad_setups(tmp_path):
    cfg, inputs, arts = _setup(tmp_path, ["index=ivf", "ivf.nlist=8", "ivf.nprobe=[2]", "ivf.default_nprobe=4"])
    with pytest.raises(ConfigError, match="hnsw"):
        measure_construction(cfg, inputs, arts)
    cfg, inputs, arts = _setup(tmp_path, ["strategies=[\"DDCopq\"]"])
    with pytest.raises(ConfigError, match="classification"):
        measure_construction(cfg, inputs, arts)


def test_insertion_reports_every_batch(tmp_path):
    cfg, inputs, _ = _setup(tmp_path)
    records = measure_insertion(cfg, inputs)
    assert [(r.strategy, r.sweep_value) for r in records] == [
        ("FDScanning", 180), ("FDScanning", 240), ("FDScanning", 300),
        ("PDScanning", 180), ("PDScanning", 240), ("PDScanning", 300),
    ]
    assert all(r.sweep_param == "n_vectors" for r in records)
    assert [r.extra["batch"] for r in records[:3]] == [0, 1, 2]
    assert records[2].extra["update_seconds"] >= records[1].extra["update_seconds"]


def test_insertion_keeps_graph_sound_and_recall_steady(tmp_path):
    cfg, inputs, _ = _setup(tmp_path, ["hnsw.default_ef_search=150"])
    records = measure_insertion(cfg, inputs)
    for name in ("FDScanning", "PDScanning"):
        rows = [r for r in records if r.strategy == name]
        assert len(rows) == 3
        for r in rows:
            assert r.status == "OK"
            assert r.extra["reachable_fraction"] >= 0.99
            assert abs(r.recall - rows[0].recall) <= 0.01


def test_insertion_reports_the_timed_fd_base_build(tmp_path, monkeypatch):
    real_build = bench.build_hnsw

    def slow_build(*args, **kwargs):
        time.sleep(0.05)
        return real_build(*args, **kwargs)

    monkeypatch.setattr(bench, "build_hnsw", slow_build)
    cfg, inputs, _ = _setup(tmp_path)
    records = measure_insertion(cfg, inputs)
    fd = [r.extra["build_seconds"] for r in records if r.strategy == "FDScanning"]
    pd = [r.extra["build_seconds"] for r in records if r.strategy == "PDScanning"]
    assert len(set(fd)) == 1 and fd[0] >= 0.05
    assert pd[0] >= 0.05


def test_evaluate_scores_short_results_as_misses(capsys):
    vectors = np.array([[0, 0], [1, 0], [10, 0], [11, 0]], dtype=np.float32)
    idx = HnswIndex(2, M=2)
    idx._append(vectors)
    idx.levels = [0, 0, 0, 0]
    idx.graphs = [{0: {1: 1.0}, 1: {0: 1.0}, 2: {3: 1.0}, 3: {2: 1.0}}]
    idx.entry_point = 0
    assert not idx.audit()["ok"]
    strategy = make_strategy(FD_SCANNING, vectors)
    queries = np.array([[0.5, 0.0]], dtype=np.float32)
    truth = ground_truth(Dataset(vectors), queries, 3)
    rec = evaluate(idx, strategy, vectors, queries, truth, k=3, value=3, repetitions=1, warmup=0)
    assert rec.extra["short_results"] == 1
    assert rec.recall == pytest.approx(2 / 3)
    assert "fewer than 3 results" in capsys.readouterr().out
