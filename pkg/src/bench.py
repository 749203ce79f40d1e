#!/usr/bin/env python3
"""
Measurement harness: QPS-recall sweeps, index construction with DCOs, batched insertion,
limited-data fitting and the scan-schedule parameter study.

Every study returns BenchRecord lists. Recall, scan fraction and DCO counts are
deterministic under the config seed; only the timing columns vary between runs.
"""

import copy
import csv
import math
import statistics
import time
from typing import Dict, List, Optional

import numpy as np

from artifacts import ArtifactSet, Inputs, build_index, fit_preprocess, load_truth, train_classifiers
from config import BenchConfig
from core import ConfigError, Dataset, KnnResult, distances_to_ids, ground_truth, tie_aware_recall
from dco import CLASSIFICATION_STRATEGIES, FD_SCANNING, DcoStats, ScanSchedule
from hnsw import build_hnsw
from ivf import build_ivf
from train import search_params_for

BENCH_FIELDS = [
    "strategy",
    "index",
    "k",
    "sweep_param",
    "sweep_value",
    "recall",
    "qps_query",
    "qps_e2e",
    "scan_fraction",
    "preproc_ms",
    "dco_count",
    "within_count",
]

OK = "OK"
SKIPPED = "SKIPPED"
AUDIT_FAILED = "AUDIT_FAILED"

SPOT_CHECK_FRACTION = 0.01
SPOT_CHECK_RTOL = 1e-3
SPOT_CHECK_ATOL = 1e-4
RECALL_NOISE = 0.01


class BenchRecord:
    """One measured point of a study."""

    def __init__(
        self,
        strategy: str,
        index_kind: str,
        k: int,
        sweep_param: str,
        sweep_value,
        recall: Optional[float] = None,
        qps_query: Optional[float] = None,
        qps_e2e: Optional[float] = None,
        scan_fraction: Optional[float] = None,
        preproc_ms: Optional[float] = None,
        dco_count: Optional[int] = None,
        within_count: Optional[int] = None,
        status: str = OK,
        extra: Optional[dict] = None,
    ):
        if recall is not None and not 0.0 <= recall <= 1.0:
            raise ValueError(f"recall must be in [0, 1], got {recall}")
        if scan_fraction is not None and not 0.0 <= scan_fraction <= 1.0:
            raise ValueError(f"scan_fraction must be in [0, 1], got {scan_fraction}")
        self.strategy = strategy
        self.index_kind = index_kind
        self.k = k
        self.sweep_param = sweep_param
        self.sweep_value = sweep_value
        self.recall = recall
        self.qps_query = qps_query
        self.qps_e2e = qps_e2e
        self.scan_fraction = scan_fraction
        self.preproc_ms = preproc_ms
        self.dco_count = dco_count
        self.within_count = within_count
        self.status = status
        self.extra = dict(extra or {})

    @classmethod
    def skipped(cls, strategy: str, index_kind: str, k: int, sweep_param: str, sweep_value, reason: str,
                extra: Optional[dict] = None) -> "BenchRecord":
        extra = dict(extra or {})
        extra["reason"] = reason
        return cls(strategy, index_kind, k, sweep_param, sweep_value, status=SKIPPED, extra=extra)

    def as_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "index_kind": self.index_kind,
            "k": self.k,
            "sweep_param": self.sweep_param,
            "sweep_value": self.sweep_value,
            "recall": self.recall,
            "qps_query": self.qps_query,
            "qps_e2e": self.qps_e2e,
            "scan_fraction": self.scan_fraction,
            "preproc_ms": self.preproc_ms,
            "dco_count": self.dco_count,
            "within_count": self.within_count,
            "status": self.status,
        }

    def to_row(self) -> list:
        values = self.as_dict()
        values["index"] = values.pop("index_kind")
        return [_fmt(values[field]) for field in BENCH_FIELDS]

    def __repr__(self) -> str:
        return (
            f"BenchRecord({self.strategy}, {self.index_kind}, k={self.k}, "
            f"{self.sweep_param}={self.sweep_value}, recall={self.recall}, status={self.status})"
        )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return str(value)


def truth_for(inputs: Inputs, arts: ArtifactSet, ks) -> Dict[int, List[KnnResult]]:
    """Ground truth per k, loaded (or brute forced) once at the largest k."""
    kmax = max(ks)
    full = load_truth(inputs, arts.paths, kmax)
    return {k: [KnnResult(r.ids[:k], r.dists[:k]) for r in full] for k in ks}


def spot_check(base: np.ndarray, queries: np.ndarray, results: List[KnnResult], seed: int = 0) -> tuple:
    """Recompute the distance of ~1% of returned neighbors; returns (checked, mismatches)."""
    entries = [(qi, j) for qi, res in enumerate(results) for j in range(len(res))]
    if not entries:
        return 0, 0
    rng = np.random.default_rng(seed)
    n = max(1, int(round(len(entries) * SPOT_CHECK_FRACTION)))
    mismatches = 0
    for pick in rng.choice(len(entries), size=min(n, len(entries)), replace=False):
        qi, j = entries[pick]
        res = results[qi]
        exact = distances_to_ids(base, queries[qi], [res.ids[j]])[0]
        if not np.isclose(res.dists[j], exact, rtol=SPOT_CHECK_RTOL, atol=SPOT_CHECK_ATOL):
            mismatches += 1
    return min(n, len(entries)), mismatches


def evaluate(
    index,
    strategy,
    base: np.ndarray,
    queries: np.ndarray,
    truth: List[KnnResult],
    k: int,
    value: int,
    repetitions: int = 3,
    warmup: int = 10,
    metric: str = "euclidean",
    sweep_param: Optional[str] = None,
    seed: int = 0,
) -> BenchRecord:
    """Search every query `repetitions` times and summarize one sweep point."""
    params = search_params_for(index, k, value)
    for q in queries[:warmup]:
        index.search(q, params, strategy)
    e2e_times = []
    query_times = []
    results = None
    totals = None
    for _ in range(repetitions):
        stats = DcoStats()
        out = []
        start = time.perf_counter()
        for q in queries:
            res, s = index.search(q, params, strategy)
            out.append(res)
            stats.merge(s)
        elapsed = time.perf_counter() - start
        e2e_times.append(elapsed)
        query_times.append(max(elapsed - stats.preproc_seconds, 0.0))
        if results is None:
            results, totals = out, stats

    n = len(queries)
    hits = [
        tie_aware_recall(res.ids, distances_to_ids(base, q, res.ids, metric), t, k)
        for q, res, t in zip(queries, results, truth)
    ]
    e2e = statistics.median(e2e_times)
    query_only = statistics.median(query_times)
    checked, bad = spot_check(base, queries, results, seed)
    if bad:
        print(f"⚠️ {strategy.name}: {bad}/{checked} spot-checked distances disagree with brute force")
    short = sum(1 for res in results if len(res) < k)
    if short:
        print(f"⚠️ {strategy.name}: {short}/{n} queries returned fewer than {k} results")
    return BenchRecord(
        strategy.name,
        index.kind,
        k,
        sweep_param or ("ef_search" if index.kind == "hnsw" else "nprobe"),
        value,
        recall=float(np.mean(hits)) if hits else 0.0,
        qps_query=n / query_only if query_only > 0 else float("inf"),
        qps_e2e=n / e2e if e2e > 0 else float("inf"),
        scan_fraction=totals.scan_fraction(index.dim),
        preproc_ms=1000.0 * totals.preproc_seconds / n if n else 0.0,
        dco_count=totals.invocations,
        within_count=totals.within,
        extra={"spot_checked": checked, "spot_mismatches": bad, "short_results": short},
    )


def check_recall_monotone(records: List[BenchRecord], strategy: str = FD_SCANNING, increasing: bool = True) -> int:
    """Flag points where recall moves against the expected direction by more than noise."""
    violations = 0
    by_k = {}
    for rec in records:
        if rec.strategy == strategy and rec.recall is not None:
            by_k.setdefault(rec.k, []).append(rec)
    for k, recs in by_k.items():
        recs = sorted(recs, key=lambda r: r.sweep_value)
        for prev, cur in zip(recs, recs[1:]):
            drop = prev.recall - cur.recall if increasing else cur.recall - prev.recall
            tolerance = 0.0 if increasing else RECALL_NOISE
            if drop > tolerance:
                violations += 1
                print(
                    f"⚠️ {strategy} k={k}: recall {prev.recall:.4f} -> {cur.recall:.4f} "
                    f"between {prev.sweep_param}={prev.sweep_value} and {cur.sweep_value}"
                )
    if violations > 1:
        print(f"⚠️ {strategy}: {violations} recall monotonicity violations (1 tolerated)")
    return violations


def _cfg_reps(cfg: BenchConfig) -> dict:
    return {"repetitions": cfg.bench["repetitions"], "warmup": cfg.bench["warmup_queries"]}


def run_sweep(
    cfg: BenchConfig,
    inputs: Inputs,
    index,
    arts: ArtifactSet,
    truth: Optional[Dict[int, List[KnnResult]]] = None,
    strategies=None,
) -> List[BenchRecord]:
    """One record per (strategy, sweep value, k) over the configured grid."""
    strategies = list(strategies or cfg.strategies)
    truth = truth or truth_for(inputs, arts, cfg.ks)
    records = []
    for name in strategies:
        strategy = arts.strategy(name, inputs.base.vectors, cfg)
        print(f"🔄 Sweeping {strategy.name} over {cfg.sweep_param}={cfg.sweep_values}, ks={cfg.ks}")
        for k in cfg.ks:
            for value in cfg.sweep_values:
                rec = evaluate(
                    index, strategy, inputs.base.vectors, inputs.queries, truth[k], k, value,
                    metric=inputs.metric, seed=cfg.seed_for("spot-check"), **_cfg_reps(cfg),
                )
                print(
                    f"📊 {rec.strategy} k={k} {rec.sweep_param}={value}: recall={rec.recall:.4f} "
                    f"qps={rec.qps_query:.1f}/{rec.qps_e2e:.1f} scan={rec.scan_fraction:.3f}"
                )
                records.append(rec)
    if FD_SCANNING in strategies:
        check_recall_monotone(records)
    return records


def measure_construction(cfg: BenchConfig, inputs: Inputs, arts: ArtifactSet,
                         truth: Optional[Dict[int, List[KnnResult]]] = None):
    """
    Build one HNSW per strategy and search every build with FDScanning.

    Returns:
        (records, deltas) where deltas[k][a][b] = recall(built with a) - recall(built with b)
    """
    if cfg.index != "hnsw":
        raise ConfigError(f"Field 'index' must be hnsw for construction-bench, got '{cfg.index}'")
    builders = [FD_SCANNING] + [s for s in cfg.strategies if s != FD_SCANNING]
    classifiers = [s for s in builders if s in CLASSIFICATION_STRATEGIES]
    if classifiers:
        raise ConfigError(
            f"Field 'strategies' lists {', '.join(classifiers)}; classification strategies cannot build an index"
        )
    truth = truth or truth_for(inputs, arts, cfg.ks)
    base = inputs.base
    value = cfg.default_sweep_value
    records = []
    recalls = {k: {} for k in cfg.ks}
    for name in builders:
        strategy = arts.strategy(name, base.vectors, cfg)
        print(f"🔨 Building HNSW with {strategy.name}")
        start = time.perf_counter()
        idx = build_hnsw(base, cfg.hnsw["M"], cfg.hnsw["ef_construction"], strategy, seed=cfg.seed_for("hnsw"))
        build_seconds = time.perf_counter() - start
        audit = idx.audit()
        if not audit["ok"]:
            print(f"⚠️ HNSW built with {name} failed its audit: {audit['problems'][:3]}")
        searcher = arts.strategy(FD_SCANNING, base.vectors, cfg)
        for k in cfg.ks:
            rec = evaluate(
                idx, searcher, base.vectors, inputs.queries, truth[k], k, value,
                metric=inputs.metric, seed=cfg.seed_for("spot-check"), **_cfg_reps(cfg),
            )
            rec.strategy = name
            rec.status = OK if audit["ok"] else AUDIT_FAILED
            rec.extra.update(
                {
                    "build_seconds": build_seconds,
                    "build_dco_count": idx.build_stats.invocations,
                    "build_scan_fraction": idx.build_stats.scan_fraction(base.dim),
                }
            )
            recalls[k][name] = rec.recall
            records.append(rec)
        print(f"✅ {name}: built in {build_seconds:.2f}s, {idx.build_stats.invocations} DCOs")
    deltas = {
        k: {a: {b: recalls[k][a] - recalls[k][b] for b in builders} for a in builders} for k in cfg.ks
    }
    for rec in records:
        rec.extra["recall_delta_vs_fd"] = deltas[rec.k][rec.strategy][FD_SCANNING]
        print(f"📊 k={rec.k} built with {rec.strategy}: recall delta vs FDScanning {rec.extra['recall_delta_vs_fd']:+.4f}")
    return records, deltas


def batch_boundaries(n: int, base_fraction: float = 0.6, batches: int = 4) -> List[int]:
    """Vector counts after the base build and after every insertion batch."""
    if not 0 < base_fraction < 1:
        raise ConfigError(f"Field 'bench.base_fraction' must be in (0, 1), got {base_fraction}")
    if batches < 1:
        raise ConfigError(f"Field 'bench.insert_batches' must be >= 1, got {batches}")
    start = int(round(n * base_fraction))
    steps = np.linspace(start, n, batches + 1)
    return [int(round(s)) for s in steps]


def measure_insertion(cfg: BenchConfig, inputs: Inputs, paths=None) -> List[BenchRecord]:
    """
    Build HNSW on the base fraction, insert the rest in batches and search after each.

    Preprocessing and classifier models are fitted on the base fraction only and kept
    frozen while vectors are inserted.
    """
    if cfg.index != "hnsw":
        raise ConfigError(f"Field 'index' must be hnsw for insert-bench, got '{cfg.index}'")
    data = inputs.base
    bounds = batch_boundaries(data.n, cfg.bench["base_fraction"], cfg.bench["insert_batches"])
    print(f"📊 Insertion boundaries: {bounds} of N={data.n}")
    base = Dataset(data.vectors[:bounds[0]], name=f"{data.name}[:{bounds[0]}]")
    arts = fit_preprocess(cfg, base, paths)
    truths = {}
    for n in bounds:
        prefix = Dataset(data.vectors[:n])
        truths[n] = {k: ground_truth(prefix, inputs.queries, k, inputs.metric) for k in cfg.ks}

    M, efC, seed = cfg.hnsw["M"], cfg.hnsw["ef_construction"], cfg.seed_for("hnsw")
    start = time.perf_counter()
    fd_base = build_hnsw(base, M, efC, arts.strategy(FD_SCANNING, base.vectors, cfg), seed=seed)
    fd_build_seconds = time.perf_counter() - start
    skipped = {}
    classifiers = [s for s in cfg.strategies if s in CLASSIFICATION_STRATEGIES]
    if classifiers:
        try:
            train_classifiers(cfg, base, fd_base, arts, kinds=classifiers, save=False)
        except (ConfigError, ValueError) as e:
            print(f"⚠️ Classifier training on the base set failed: {e}")
            skipped = {name: str(e) for name in classifiers}

    value = cfg.default_sweep_value
    records = []
    for name in cfg.strategies:
        if name in skipped:
            for n in bounds:
                for k in cfg.ks:
                    records.append(BenchRecord.skipped(name, "hnsw", k, "n_vectors", n, skipped[name]))
            continue
        classification = name in CLASSIFICATION_STRATEGIES
        builder = FD_SCANNING if classification else name
        print(f"🔨 {name}: base build over {bounds[0]} vectors with {builder}")
        inserter = arts.strategy(builder, base.vectors, cfg)
        if builder == FD_SCANNING:
            # FD-built rows all report the single timed base build.
            idx = copy.deepcopy(fd_base)
            build_seconds = fd_build_seconds
        else:
            start = time.perf_counter()
            idx = build_hnsw(base, M, efC, inserter, seed=seed)
            build_seconds = time.perf_counter() - start
        update_seconds = 0.0
        for batch, n in enumerate(bounds):
            if batch:
                start = time.perf_counter()
                idx.insert_batch(data.vectors[bounds[batch - 1]:n], inserter)
                update_seconds += time.perf_counter() - start
            audit = idx.audit()
            if not audit["ok"]:
                print(f"⚠️ {name}: audit failed after batch {batch}: {audit['problems'][:3]}")
            searcher = arts.strategy(name, idx.vectors, cfg) if classification else inserter
            for k in cfg.ks:
                rec = evaluate(
                    idx, searcher, idx.vectors, inputs.queries, truths[n][k], k, value,
                    metric=inputs.metric, sweep_param="n_vectors", seed=cfg.seed_for("spot-check"),
                    **_cfg_reps(cfg),
                )
                rec.sweep_value = n
                rec.status = OK if audit["ok"] else AUDIT_FAILED
                rec.extra.update(
                    {
                        "batch": batch,
                        "build_seconds": build_seconds,
                        "update_seconds": update_seconds,
                        "reachable_fraction": audit["reachable_fraction"],
                    }
                )
                records.append(rec)
                print(f"📊 {name} batch {batch} N={n} k={k}: recall={rec.recall:.4f} update={update_seconds:.2f}s")
        check_recall_monotone([r for r in records if r.strategy == name], strategy=name, increasing=False)
    return records


def _sample_rows(n: int, fraction: float, seed: int) -> np.ndarray:
    size = max(2, int(math.ceil(n * fraction)))
    if size >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=size, replace=False))


def _training_index(cfg: BenchConfig, sample: Dataset, arts: ArtifactSet):
    if cfg.index == "ivf":
        return build_ivf(sample, min(cfg.ivf["nlist"], sample.n), seed=cfg.seed_for("ivf"))
    return build_index(cfg, sample, arts, FD_SCANNING)


def limited_data_study(cfg: BenchConfig, inputs: Inputs, index, truth=None, fractions=None,
                       paths=None) -> List[BenchRecord]:
    """
    Fit preprocessing (and classifier models) on a fraction of the base set and evaluate
    on the full index. Classification strategies below the training floor are SKIPPED.
    """
    fractions = list(fractions or cfg.bench["limited_fractions"])
    bad = [f for f in fractions if not 0 < f <= 1]
    if bad:
        raise ConfigError(f"Field 'bench.limited_fractions' values must be in (0, 1], got {bad}")
    base = inputs.base
    if truth is None:
        truth = {k: ground_truth(base, inputs.queries, k, inputs.metric) for k in cfg.ks}
    floor = cfg.train["classifier_min_vectors"]
    value = cfg.default_sweep_value
    records = []
    for fraction in fractions:
        rows = _sample_rows(base.n, fraction, cfg.seed_for(f"limited-{fraction}"))
        sample = base if len(rows) == base.n else base.subset(rows)
        print(f"🔄 Fraction {fraction}: fitting on {sample.n} of {base.n} vectors")
        extra = {"fraction": fraction, "fit_vectors": sample.n}
        try:
            arts = fit_preprocess(cfg, sample, paths)
        except ValueError as e:
            for name in cfg.strategies:
                for k in cfg.ks:
                    records.append(BenchRecord.skipped(name, index.kind, k, "fraction", fraction, str(e), extra))
            continue
        classifiers = [s for s in cfg.strategies if s in CLASSIFICATION_STRATEGIES]
        failed = {}
        if classifiers and sample.n >= floor:
            try:
                train_index = index if sample is base else _training_index(cfg, sample, arts)
                train_classifiers(cfg, sample, train_index, arts, kinds=classifiers, save=False)
            except (ConfigError, ValueError) as e:
                failed = {name: str(e) for name in classifiers}
        for name in cfg.strategies:
            reason = None
            if name in classifiers and sample.n < floor:
                reason = f"{sample.n} training vectors < {floor} required"
            elif name in failed:
                reason = failed[name]
            if reason is None:
                try:
                    strategy = arts.strategy(name, base.vectors, cfg)
                except (ConfigError, ValueError) as e:
                    reason = str(e)
            if reason is not None:
                print(f"⚠️ {name} at fraction {fraction}: SKIPPED ({reason})")
                for k in cfg.ks:
                    records.append(BenchRecord.skipped(name, index.kind, k, "fraction", fraction, reason, extra))
                continue
            for k in cfg.ks:
                rec = evaluate(
                    index, strategy, base.vectors, inputs.queries, truth[k], k, value,
                    metric=inputs.metric, sweep_param="fraction", seed=cfg.seed_for("spot-check"),
                    **_cfg_reps(cfg),
                )
                rec.sweep_value = fraction
                rec.extra.update(extra)
                records.append(rec)
                print(f"📊 {name} fraction={fraction} k={k}: recall={rec.recall:.4f} scan={rec.scan_fraction:.3f}")
    return records


def param_study(cfg: BenchConfig, inputs: Inputs, index, arts: ArtifactSet,
                truth: Optional[Dict[int, List[KnnResult]]] = None) -> List[BenchRecord]:
    """Sweep delta0 and delta_d one at a time at the default search parameter."""
    truth = truth or truth_for(inputs, arts, cfg.ks)
    delta0, delta_d = cfg.dco["delta0"], cfg.dco["delta_d"]
    value = cfg.default_sweep_value
    grids = [("delta0", cfg.bench["delta0_grid"]), ("delta_d", cfg.bench["delta_d_grid"])]
    records = []
    for param, grid in grids:
        for v in grid:
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"Field 'bench.{param}_grid' values must be integers >= 1, got {v!r}")
            sched = ScanSchedule(v, delta_d) if param == "delta0" else ScanSchedule(delta0, v)
            for name in cfg.strategies:
                try:
                    strategy = arts.strategy(name, inputs.base.vectors, cfg, sched)
                except ConfigError as e:
                    print(f"⚠️ {name} at {param}={v}: SKIPPED ({e})")
                    for k in cfg.ks:
                        records.append(BenchRecord.skipped(name, index.kind, k, param, v, str(e)))
                    continue
                for k in cfg.ks:
                    rec = evaluate(
                        index, strategy, inputs.base.vectors, inputs.queries, truth[k], k, value,
                        metric=inputs.metric, sweep_param=param, seed=cfg.seed_for("spot-check"),
                        **_cfg_reps(cfg),
                    )
                    rec.sweep_value = v
                    records.append(rec)
                    print(f"📊 {name} {param}={v} k={k}: recall={rec.recall:.4f} scan={rec.scan_fraction:.3f}")
    return records


def write_bench_csv(records: List[BenchRecord], path: str) -> int:
    """The sweep CSV: exactly BENCH_FIELDS, measured records only."""
    rows = [rec.to_row() for rec in records if rec.status != SKIPPED]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(BENCH_FIELDS)
        writer.writerows(rows)
    print(f"✅ Wrote {len(rows)} records to {path}")
    return len(rows)


def write_study_csv(records: List[BenchRecord], path: str) -> int:
    """Study CSVs: BENCH_FIELDS, then status and every extra column seen."""
    extras = []
    for rec in records:
        for key in rec.extra:
            if key not in extras:
                extras.append(key)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(BENCH_FIELDS + ["status"] + extras)
        for rec in records:
            writer.writerow(rec.to_row() + [rec.status] + [_fmt(rec.extra.get(key)) for key in extras])
    print(f"✅ Wrote {len(records)} records to {path}")
    return len(records)
