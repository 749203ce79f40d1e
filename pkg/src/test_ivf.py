import numpy as np
import pytest

from core import Dataset, brute_force_knn
from dco import AD_SAMPLING, FD_SCANNING, PD_SCANNING, DcoStats, ScanSchedule, make_strategy
from hnsw import SearchParams
from ivf import build_ivf, load_ivf, save_ivf, search_ivf
from transform import random_orthogonal


@pytest.fixture(scope="module")
def built():
    ds = Dataset(np.random.default_rng(0).standard_normal((500, 24)).astype(np.float32))
    return ds, build_ivf(ds, nlist=16, seed=1)


def test_partitions_are_contiguous_and_complete(built):
    ds, idx = built
    assert idx.partition_sizes().sum() == ds.n
    assert sorted(idx.order.tolist()) == list(range(ds.n))
    for p in range(idx.nlist):
        members = idx.partition(p)
        assert np.all(idx.labels[members] == p)
        assert members.tolist() == sorted(members.tolist())


def test_probing_every_partition_is_exhaustive(built):
    ds, idx = built
    strategy = make_strategy(FD_SCANNING, ds.vectors)
    queries = np.random.default_rng(2).standard_normal((10, 24)).astype(np.float32)
    for q in queries:
        res, stats = search_ivf(idx, q, SearchParams(10, nprobe=idx.nlist), strategy)
        assert set(res.ids.tolist()) == set(brute_force_knn(ds, q, 10).ids.tolist())
        assert stats.invocations == ds.n


def test_pd_scanning_matches_fd_and_scans_less(built):
    ds, idx = built
    q = np.random.default_rng(3).standard_normal(24).astype(np.float32)
    params = SearchParams(5, nprobe=4)
    res_fd, stats_fd = idx.search(q, params, make_strategy(FD_SCANNING, ds.vectors))
    res_pd, stats_pd = idx.search(q, params, make_strategy(PD_SCANNING, ds.vectors))
    assert res_fd.ids.tolist() == res_pd.ids.tolist()
    assert stats_pd.dims_scanned < stats_fd.dims_scanned


def test_probe_order_starts_at_nearest_centroid(built):
    _, idx = built
    c = idx.centroids[5]
    assert idx.probe_order(c, 3)[0] == 5


def test_search_validation(built):
    ds, idx = built
    strategy = make_strategy(FD_SCANNING, ds.vectors)
    with pytest.raises(ValueError, match="nprobe"):
        idx.search(ds.vectors[0], SearchParams(5, nprobe=17), strategy)
    with pytest.raises(ValueError):
        build_ivf(ds, nlist=0)


@pytest.mark.parametrize("name", [PD_SCANNING, AD_SAMPLING])
def test_scan_fraction_falls_as_more_partitions_are_scanned(name):
    rng = np.random.default_rng(4)
    scales = 1.0 / (1.0 + np.arange(64) / 4.0)
    ds = Dataset((rng.standard_normal((2000, 64)) * scales).astype(np.float32))
    queries = (rng.standard_normal((15, 64)) * scales).astype(np.float32)
    idx = build_ivf(ds, nlist=64, seed=5)
    strategy = make_strategy(name, ds.vectors, sched=ScanSchedule(8, 8), ortho=random_orthogonal(64, seed=6))
    fractions = []
    for nprobe in (8, 16, 32, 64):
        stats = DcoStats()
        for q in queries:
            stats.merge(idx.search(q, SearchParams(10, nprobe=nprobe), strategy)[1])
        fractions.append(stats.scan_fraction(64))
    assert all(b <= a for a, b in zip(fractions, fractions[1:])), fractions
    assert fractions[-1] < 1.0


def test_persistence_round_trip(tmp_path, built):
    ds, idx = built
    path = str(tmp_path / "ivf.bin")
    save_ivf(idx, path)
    loaded = load_ivf(path)
    assert np.array_equal(loaded.centroids, idx.centroids)
    assert np.array_equal(loaded.order, idx.order)
    assert np.array_equal(loaded.offsets, idx.offsets)
