import numpy as np
import pytest

from core import Dataset, brute_force_knn, recall
from dco import (
    AD_SAMPLING,
    DADE,
    DDC_OPQ,
    DDC_RES,
    FD_SCANNING,
    PD_SCANNING,
    PD_SCANNING_PLUS,
    HypothesisParams,
    ScanSchedule,
    calibrate_dade,
    make_strategy,
)
from hnsw import HnswIndex, SearchParams, build_hnsw, insert_hnsw, load_hnsw, save_hnsw, search_hnsw
from quantize import train_pq
from train import LinearModel
from transform import fit_pca, random_orthogonal


def _data(n=300, dim=16, seed=0):
    return Dataset(np.random.default_rng(seed).standard_normal((n, dim)).astype(np.float32))


@pytest.fixture(scope="module")
def built():
    ds = _data()
    idx = build_hnsw(ds, M=8, ef_construction=64, strategy=make_strategy(FD_SCANNING, ds.vectors), seed=1)
    return ds, idx


def test_build_passes_audit(built):
    ds, idx = built
    audit = idx.audit()
    assert audit["ok"], audit["problems"][:5]
    assert audit["reachable_fraction"] >= 0.99
    assert idx.n == ds.n
    assert idx.build_stats.invocations > 0


def test_exhaustive_beam_recovers_true_neighbors(built):
    ds, idx = built
    strategy = make_strategy(FD_SCANNING, ds.vectors)
    queries = np.random.default_rng(2).standard_normal((10, 16)).astype(np.float32)
    for q in queries:
        res, stats = search_hnsw(idx, q, SearchParams(10, ef_search=ds.n), strategy)
        assert recall(res, brute_force_knn(ds, q, 10), 10) >= 0.9
        assert stats.invocations > 0
        assert np.all(np.diff(res.dists) >= 0)


def test_recall_grows_with_ef(built):
    ds, idx = built
    strategy = make_strategy(FD_SCANNING, ds.vectors)
    queries = np.random.default_rng(3).standard_normal((20, 16)).astype(np.float32)
    truth = [brute_force_knn(ds, q, 10) for q in queries]
    means = []
    for ef in (10, 40, 160):
        hits = [recall(search_hnsw(idx, q, SearchParams(10, ef_search=ef), strategy)[0], t, 10) for q, t in zip(queries, truth)]
        means.append(np.mean(hits))
    assert means[2] >= means[0]
    assert means[2] >= 0.9


def test_exact_strategies_return_the_same_results(built):
    ds, idx = built
    fd = make_strategy(FD_SCANNING, ds.vectors)
    pd = make_strategy(PD_SCANNING, ds.vectors)
    q = np.random.default_rng(4).standard_normal(16).astype(np.float32)
    params = SearchParams(10, ef_search=50)
    res_fd, stats_fd = idx.search(q, params, fd)
    res_pd, stats_pd = idx.search(q, params, pd)
    assert res_fd.ids.tolist() == res_pd.ids.tolist()
    assert res_fd.dists.tolist() == res_pd.dists.tolist()
    assert stats_pd.invocations == stats_fd.invocations
    assert stats_pd.dims_scanned <= stats_fd.dims_scanned


def test_pd_build_matches_fd_build():
    ds = _data(n=120, dim=48, seed=5)
    fd = build_hnsw(ds, 6, 32, make_strategy(FD_SCANNING, ds.vectors), seed=2)
    pd = build_hnsw(ds, 6, 32, make_strategy(PD_SCANNING, ds.vectors), seed=2)
    assert fd.graphs == pd.graphs
    assert pd.build_stats.dims_scanned < fd.build_stats.dims_scanned


def test_rotated_strategy_builds_a_valid_graph():
    ds = _data(n=150, dim=32, seed=6)
    plus = make_strategy(PD_SCANNING_PLUS, ds.vectors, pca=fit_pca(ds))
    idx = build_hnsw(ds, 8, 40, plus, seed=3)
    assert idx.audit()["ok"]


def test_insert_extends_index_and_strategy():
    ds = _data(n=200, seed=7)
    strategy = make_strategy(FD_SCANNING, ds.vectors[:150])
    idx = build_hnsw(Dataset(ds.vectors[:150]), 8, 48, strategy, seed=4)
    ids = idx.insert_batch(ds.vectors[150:190], strategy)
    assert ids == list(range(150, 190))
    insert_hnsw(idx, ds.vectors[190], strategy)
    assert idx.n == strategy.n == 191
    assert idx.audit()["ok"]
    res, _ = idx.search(ds.vectors[170], SearchParams(1, ef_search=50), strategy)
    assert res.ids.tolist() == [170]


def test_classification_strategy_cannot_build():
    ds = _data(n=64, dim=8, seed=8)
    cb = train_pq(ds, c=2, b=2)
    opq = make_strategy(DDC_OPQ, ds.vectors, codebook=cb, opq_models={10: LinearModel(np.zeros(2), -1.0, 10)})
    with pytest.raises(ValueError, match="classification"):
        build_hnsw(ds, 8, 16, opq)


def test_search_validation(built):
    ds, idx = built
    strategy = make_strategy(FD_SCANNING, ds.vectors)
    with pytest.raises(ValueError):
        SearchParams(10, ef_search=5)
    with pytest.raises(ValueError):
        SearchParams(0)
    with pytest.raises(ValueError, match="exceeds"):
        idx.search(ds.vectors[0], SearchParams(ds.n + 1), strategy)
    with pytest.raises(ValueError):
        idx.search(ds.vectors[0], SearchParams(5), make_strategy(FD_SCANNING, ds.vectors[:10]))
    with pytest.raises(ValueError):
        HnswIndex(16, M=1)


def test_persistence_round_trip(tmp_path, built):
    ds, idx = built
    path = str(tmp_path / "hnsw.bin")
    save_hnsw(idx, path)
    loaded = load_hnsw(path)
    assert loaded.graphs == idx.graphs
    assert loaded.levels == idx.levels
    assert loaded.entry_point == idx.entry_point
    assert np.array_equal(loaded.vectors, idx.vectors)
    strategy = make_strategy(FD_SCANNING, ds.vectors)
    q = ds.vectors[11] + 0.05
    a, _ = idx.search(q, SearchParams(5, ef_search=30), strategy)
    b, _ = loaded.search(q, SearchParams(5, ef_search=30), strategy)
    assert a.ids.tolist() == b.ids.tolist()


def _decaying(n, dim=64, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, dim)) / (1.0 + np.arange(dim) / 4.0)).astype(np.float32)


def _strategies(x, names):
    ds = Dataset(x)
    pca = fit_pca(ds)
    eps = calibrate_dade(pca.rotate_rows(x, center=True), pca.eigen_prefix, n_pairs=20000, seed=1)
    params = HypothesisParams(dade_eps=eps)
    ortho = random_orthogonal(ds.dim, seed=2)
    sched = ScanSchedule(16, 16)
    return {name: make_strategy(name, x, sched=sched, params=params, pca=pca, ortho=ortho) for name in names}


def _mean_recall(idx, strategy, queries, truth, k, ef):
    params = SearchParams(k, ef_search=ef)
    return float(np.mean([recall(idx.search(q, params, strategy)[0], t, k) for q, t in zip(queries, truth)]))


def test_hypothesis_searches_track_fd_recall():
    ds = Dataset(_decaying(800, seed=11))
    idx = build_hnsw(ds, 8, 64, make_strategy(FD_SCANNING, ds.vectors), seed=5)
    queries = _decaying(20, seed=12)
    truth = [brute_force_knn(ds, q, 10) for q in queries]
    strategies = _strategies(ds.vectors, (FD_SCANNING, AD_SAMPLING, DADE, DDC_RES))
    recalls = {name: _mean_recall(idx, s, queries, truth, 10, 80) for name, s in strategies.items()}
    for name in (AD_SAMPLING, DADE, DDC_RES):
        assert abs(recalls[name] - recalls[FD_SCANNING]) <= 0.02, recalls


def test_dco_built_graphs_search_like_the_fd_graph():
    ds = Dataset(_decaying(500, dim=32, seed=13))
    queries = _decaying(20, dim=32, seed=14)
    truth = [brute_force_knn(ds, q, 10) for q in queries]
    fd = make_strategy(FD_SCANNING, ds.vectors)
    builders = _strategies(ds.vectors, (FD_SCANNING, PD_SCANNING_PLUS, AD_SAMPLING, DADE, DDC_RES))
    recalls = {}
    for name, strategy in builders.items():
        idx = build_hnsw(ds, 8, 48, strategy, seed=6)
        audit = idx.audit()
        assert audit["ok"], (name, audit["problems"][:5])
        recalls[name] = _mean_recall(idx, fd, queries, truth, 10, 200)
    for name in (PD_SCANNING_PLUS, AD_SAMPLING, DADE, DDC_RES):
        assert abs(recalls[name] - recalls[FD_SCANNING]) <= 0.005, recalls
