import json
import os

from bench import BenchRecord
from db import ResultsStore
from manifest import TOOL_NAME, RunManifest, derive_run_id, get_system_info


def test_results_store_round_trip(tmp_path):
    store = ResultsStore(str(tmp_path / "results.db"))
    assert {"runs", "records"} <= set(store.get_tables())
    store.add_run("abc123", "bench", "2026-01-01T00:00:00+00:00", "manifest_bench_abc123.json", "f" * 16, 42)
    records = [
        BenchRecord("FDScanning", "hnsw", 10, "ef_search", 100, recall=0.9, scan_fraction=1.0, dco_count=500),
        BenchRecord.skipped("DDCpca", "hnsw", 10, "fraction", 0.01, "too few vectors"),
    ]
    assert store.add_records("abc123", "sweep", records) == 2
    rows = store.records_for("abc123")
    assert [r["strategy"] for r in rows] == ["FDScanning", "DDCpca"]
    assert rows[0]["recall"] == 0.9
    assert rows[1]["status"] == "SKIPPED"
    assert rows[1]["recall"] is None
    assert store.select("runs")[0]["seed"] == 42


def test_manifest_written_with_run_facts(tmp_path):
    manifest = RunManifest("bench", {"seed": 1}, {"root": 1})
    manifest.add_fingerprint("base", "deadbeef")
    manifest.add_output(str(tmp_path / "bench_x.csv"))
    path = manifest.write(str(tmp_path))
    assert os.path.basename(path) == f"manifest_bench_{manifest.run_id}.json"
    with open(path) as f:
        data = json.load(f)
    assert data["tool"] == TOOL_NAME
    assert data["outputs"] == ["bench_x.csv"]
    assert data["dataset_fingerprints"] == {"base": "deadbeef"}
    assert data["finished"] is not None
    assert data["git_describe"]


def test_system_info_has_hardware_facts():
    info = get_system_info()
    assert info["cpu_count_logical"] >= 1
    assert info["memory_total_gb"] > 0


def test_run_id_is_fixed_by_command_config_and_seeds():
    config = {"seed": 1, "ks": [10, 20], "hnsw": {"M": 16}}
    first = RunManifest("bench", config, {"root": 1})
    again = RunManifest("bench", {"hnsw": {"M": 16}, "ks": [10, 20], "seed": 1}, {"root": 1})
    assert first.run_id == again.run_id == derive_run_id("bench", config, {"root": 1})
    assert derive_run_id("bench", config, {"root": 2}) != first.run_id
    assert derive_run_id("train", config, {"root": 1}) != first.run_id
    assert derive_run_id("bench", dict(config, ks=[10]), {"root": 1}) != first.run_id


def test_rerun_replaces_the_stored_run(tmp_path):
    store = ResultsStore(str(tmp_path / "results.db"))
    run_id = derive_run_id("bench", {"seed": 1}, {"root": 1})
    first = [BenchRecord("FDScanning", "hnsw", 10, "ef_search", v, recall=0.9) for v in (100, 200)]
    store.add_run(run_id, "bench", "2026-01-01T00:00:00+00:00", seed=1)
    store.add_records(run_id, "sweep", first)
    store.add_run(run_id, "bench", "2026-01-02T00:00:00+00:00", seed=1)
    store.add_records(run_id, "sweep", first[:1])
    runs = store.select("runs")
    assert len(runs) == 1
    assert runs[0]["started"] == "2026-01-02T00:00:00+00:00"
    assert [r["sweep_value"] for r in store.records_for(run_id)] == [100]
