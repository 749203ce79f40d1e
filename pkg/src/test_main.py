import csv
import glob
import json
import os

import pytest

from bench import BENCH_FIELDS
from main import EXIT_CONFIG, EXIT_OK, main
from vecs_io import read_ivecs

CONFIG = {
    "strategies": ["FDScanning", "PDScanning"],
    "ks": [5],
    "dataset": {"synthetic": {"n": 300, "dim": 16, "distribution": "low-rank", "rank": 4}, "n_queries": 10},
    "hnsw": {"M": 8, "ef_construction": 40, "ef_search": [20], "default_ef_search": 20},
    "dco": {"delta0": 8, "delta_d": 8, "dade_pairs": 2000},
    "pq": {"b": 4},
    "train": {"n_queries": 100, "ef_search": 40},
    "bench": {"repetitions": 1, "warmup_queries": 1},
}


@pytest.fixture
def run(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(CONFIG))
    out = tmp_path / "out"

    def _run(command, *overrides):
        args = [command, "--config", str(path), "--set", f"output_dir=\"{out}\""]
        for o in overrides:
            args += ["--set", o]
        return main(args)

    _run.out = out
    return _run


def _latest(out, pattern):
    return sorted(glob.glob(os.path.join(str(out), pattern)), key=os.path.getmtime)[-1]


def test_groundtruth_writes_ivecs_and_manifest(run):
    assert run("groundtruth") == EXIT_OK
    ids = read_ivecs(os.path.join(str(run.out), "groundtruth.ivecs"))
    assert ids.shape == (10, 5)
    with open(_latest(run.out, "manifest_groundtruth_*.json")) as f:
        manifest = json.load(f)
    assert manifest["outputs"] == ["groundtruth.ivecs"]
    assert "base" in manifest["dataset_fingerprints"]


def test_rerun_reuses_the_run_id(run):
    assert run("groundtruth") == EXIT_OK
    assert run("groundtruth") == EXIT_OK
    assert len(glob.glob(os.path.join(str(run.out), "manifest_groundtruth_*.json"))) == 1
    assert run("groundtruth", "seed=7") == EXIT_OK
    assert len(glob.glob(os.path.join(str(run.out), "manifest_groundtruth_*.json"))) == 2


def test_bench_before_build_is_a_config_error(run, capsys):
    assert run("bench") == EXIT_CONFIG
    assert "hnsw.bin" in capsys.readouterr().out


def test_unknown_strategy_is_a_config_error(run, capsys):
    assert run("preprocess", "strategies=[\"LSH\"]") == EXIT_CONFIG
    assert "Valid strategies" in capsys.readouterr().out


def test_missing_dataset_is_a_config_error(tmp_path):
    assert main(["groundtruth", "--set", f"output_dir=\"{tmp_path}\""]) == EXIT_CONFIG


def test_full_pipeline(run, capsys):
    assert run("preprocess") == EXIT_OK
    for name in ("pca.bin", "ortho.bin", "dade_eps.json", "pq.bin"):
        assert os.path.exists(os.path.join(str(run.out), name))
    assert run("build") == EXIT_OK
    assert run("groundtruth") == EXIT_OK

    capsys.readouterr()
    assert run("bench", "strategies=[\"DDCpca\"]") == EXIT_CONFIG
    assert "ddcpca_models.json" in capsys.readouterr().out

    assert run("train", "train.ks=[5]") == EXIT_OK
    assert os.path.exists(os.path.join(str(run.out), "ddcopq_models.bin"))

    strategies = "strategies=[\"FDScanning\", \"PDScanningPlus\", \"ADSampling\", \"DADE\", \"DDCres\", \"DDCpca\", \"DDCopq\"]"
    assert run("bench", strategies) == EXIT_OK
    with open(_latest(run.out, "bench_*.csv"), newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == BENCH_FIELDS
    assert [r[0] for r in rows[1:]] == [
        "FDScanning", "PDScanningPlus", "ADSampling", "DADE", "DDCres", "DDCpca", "DDCopq",
    ]
    for row in rows[1:]:
        record = dict(zip(BENCH_FIELDS, row))
        assert 0.0 <= float(record["recall"]) <= 1.0
        assert 0.0 < float(record["scan_fraction"]) <= 1.0
    assert os.path.exists(os.path.join(str(run.out), "results.db"))
