#!/usr/bin/env python3
"""
Artifact pipeline glue between the CLI and the library modules.

Each command reads what earlier commands wrote into the output directory:

    preprocess  -> pca.bin, ortho.bin, dade_eps.json, pq.bin
    build       -> hnsw.bin | ivf.bin
    train       -> ddcpca_models.json/.bin, ddcopq_models.json/.bin, samples_*.csv
    groundtruth -> groundtruth.ivecs

A strategy asked for without the file it needs raises ConfigError naming the file and
the command that produces it.
"""

import json
import os
import time
from typing import Dict, List, Optional

import numpy as np

from config import BenchConfig
from core import COSINE, EUCLIDEAN, INNER_PRODUCT, ConfigError, Dataset, KnnResult, distances_to_ids, ground_truth
from dco import (
    AD_SAMPLING,
    DADE,
    DDC_OPQ,
    DDC_PCA,
    DDC_RES,
    PD_SCANNING_PLUS,
    HypothesisParams,
    ScanSchedule,
    Strategy,
    calibrate_dade,
    canonical_strategy,
    make_strategy,
)
from hnsw import build_hnsw, load_hnsw, save_hnsw
from ivf import build_ivf, load_ivf, save_ivf
from quantize import default_subspaces, load_codebook, save_codebook, train_pq
from train import dump_samples_csv, fit_models, gen_training_samples, load_models, save_models
from transform import (
    fit_pca,
    load_ortho,
    load_pca,
    normalize_dataset,
    random_orthogonal,
    save_ortho,
    save_pca,
)
from vecs_io import SyntheticSpec, gen_synthetic, read_fvecs, read_ivecs, write_ivecs


class ArtifactPaths:
    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.pca = self._path("pca.bin")
        self.ortho = self._path("ortho.bin")
        self.dade_eps = self._path("dade_eps.json")
        self.pq = self._path("pq.bin")
        self.models = {
            DDC_PCA: (self._path("ddcpca_models.json"), self._path("ddcpca_models.bin")),
            DDC_OPQ: (self._path("ddcopq_models.json"), self._path("ddcopq_models.bin")),
        }
        self.hnsw = self._path("hnsw.bin")
        self.ivf = self._path("ivf.bin")
        self.groundtruth = self._path("groundtruth.ivecs")
        self.results_db = self._path("results.db")

    def _path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def samples_csv(self, kind: str) -> str:
        return self._path(f"samples_{kind.lower()}.csv")

    def index(self, kind: str) -> str:
        return self.hnsw if kind == "hnsw" else self.ivf

    def ensure_dir(self):
        os.makedirs(self.output_dir, exist_ok=True)


def _missing(path: str, command: str, what: str) -> ConfigError:
    return ConfigError(f"{what} needs {path}, which does not exist; run the '{command}' command first")


class Inputs:
    """Base vectors, query vectors and their provenance."""

    def __init__(self, base: Dataset, queries: np.ndarray, metric: str = EUCLIDEAN, truth_path: Optional[str] = None):
        if queries.ndim != 2 or queries.shape[1] != base.dim:
            raise ValueError(f"Queries have shape {queries.shape}, base has D={base.dim}")
        self.base = base
        self.queries = np.ascontiguousarray(queries, dtype=np.float32)
        self.metric = metric
        self.truth_path = truth_path

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]


def load_inputs(cfg: BenchConfig) -> Inputs:
    ds_cfg = cfg.dataset
    n_queries = ds_cfg.get("n_queries") or 100
    queries = None
    if ds_cfg.get("queries"):
        queries = read_fvecs(ds_cfg["queries"]).vectors
    if ds_cfg.get("synthetic"):
        try:
            spec = SyntheticSpec.from_dict(ds_cfg["synthetic"], seed=cfg.seed_for("synthetic"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Field 'dataset.synthetic' is invalid: {e}")
        if queries is None:
            spec.n += n_queries
            data = gen_synthetic(spec).vectors
            base = Dataset(data[:-n_queries], name=spec.describe())
            queries = data[-n_queries:]
        else:
            base = gen_synthetic(spec)
    else:
        if not os.path.exists(ds_cfg["base"]):
            raise ConfigError(f"Field 'dataset.base' points to a missing file: {ds_cfg['base']}")
        base = read_fvecs(ds_cfg["base"])
        if queries is None:
            # Hold queries out of the base set so no query finds itself.
            if base.n <= n_queries:
                raise ConfigError(f"Field 'dataset.n_queries'={n_queries} leaves no base vectors (N={base.n})")
            rng = np.random.default_rng(cfg.seed_for("queries"))
            held = np.zeros(base.n, dtype=bool)
            held[rng.choice(base.n, size=n_queries, replace=False)] = True
            queries = base.vectors[held]
            base = Dataset(base.vectors[~held], name=base.name)
    Dataset(queries, name="queries")
    if cfg.metric in (INNER_PRODUCT, COSINE):
        base = normalize_dataset(base)
        queries = normalize_dataset(Dataset(queries)).vectors
    print(f"📊 Base {base.name}: N={base.n}, D={base.dim}; {queries.shape[0]} queries; metric {cfg.metric}")
    return Inputs(base, queries, cfg.metric, ds_cfg.get("truth"))


def compute_truth(inputs: Inputs, k: int) -> np.ndarray:
    results = ground_truth(inputs.base, inputs.queries, k, inputs.metric)
    return np.stack([r.ids for r in results]).astype(np.int32)


def _truth_results(inputs: Inputs, ids: np.ndarray, k: int) -> List[KnnResult]:
    results = []
    for q, row in zip(inputs.queries, ids[:, :k].astype(np.int64)):
        dists = distances_to_ids(inputs.base.vectors, q, row, inputs.metric)
        order = np.lexsort((row, dists))
        results.append(KnnResult(row[order], dists[order]))
    return results


def load_truth(inputs: Inputs, paths: ArtifactPaths, k: int) -> List[KnnResult]:
    """Ground truth for the first k neighbors; computed by brute force when no file exists."""
    path = inputs.truth_path or paths.groundtruth
    if os.path.exists(path):
        ids = read_ivecs(path)
        if ids.shape[0] != inputs.n_queries or ids.shape[1] < k:
            raise ConfigError(
                f"Ground truth {path} has shape {ids.shape}, need {inputs.n_queries} rows x >= {k} ids; "
                f"rerun 'groundtruth'"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= inputs.base.n):
            raise ConfigError(f"Ground truth {path} references ids outside [0, {inputs.base.n})")
        return _truth_results(inputs, ids, k)
    print(f"⚠️ No ground truth at {path}; computing it by brute force")
    return ground_truth(inputs.base, inputs.queries, k, inputs.metric)


def write_truth(inputs: Inputs, paths: ArtifactPaths, k: int) -> str:
    start = time.perf_counter()
    print(f"🔄 Computing ground truth for {inputs.n_queries} queries, k={k}")
    write_ivecs(compute_truth(inputs, k), paths.groundtruth)
    print(f"✅ Ground truth written to {paths.groundtruth} in {time.perf_counter() - start:.1f}s")
    return paths.groundtruth


class ArtifactSet:
    """Offline artifacts in memory; any of them may be absent."""

    def __init__(self, pca=None, ortho=None, dade_eps=None, codebook=None, models=None, trained_index=None,
                 paths: Optional[ArtifactPaths] = None):
        self.pca = pca
        self.ortho = ortho
        self.dade_eps = dade_eps
        self.codebook = codebook
        self.models = models or {}
        self.trained_index = trained_index or {}
        self.paths = paths or ArtifactPaths(".")

    def _require(self, value, path: str, command: str, what: str):
        if value is None:
            raise _missing(path, command, what)
        return value

    def strategy(self, name: str, vectors, cfg: BenchConfig, sched: Optional[ScanSchedule] = None) -> Strategy:
        """Build a strategy over vectors from the artifacts it needs."""
        name = canonical_strategy(name)
        sched = sched or ScanSchedule(cfg.dco["delta0"], cfg.dco["delta_d"])
        p = self.paths
        kwargs = {}
        if name in (PD_SCANNING_PLUS, DADE, DDC_RES, DDC_PCA):
            kwargs["pca"] = self._require(self.pca, p.pca, "preprocess", name)
        if name == AD_SAMPLING:
            kwargs["ortho"] = self._require(self.ortho, p.ortho, "preprocess", name)
        dade_eps = None
        if name == DADE:
            dade_eps = self._require(self.dade_eps, p.dade_eps, "preprocess", name)
        if name == DDC_OPQ:
            kwargs["codebook"] = self._require(self.codebook, p.pq, "preprocess", name)
        if name in (DDC_PCA, DDC_OPQ):
            models = self._require(self.models.get(name), p.models[name][0], "train", name)
            kwargs["pca_models" if name == DDC_PCA else "opq_models"] = models
            trained_on = self.trained_index.get(name)
            if trained_on and trained_on != cfg.index:
                print(f"⚠️ {name} models were trained on a {trained_on} index, deploying on {cfg.index}")
        params = HypothesisParams(cfg.dco["eps0"], cfg.dco["alpha"], dade_eps, cfg.dco["m"])
        return make_strategy(name, vectors, sched=sched, params=params, **kwargs)

    def save_preprocess(self):
        p = self.paths
        p.ensure_dir()
        save_pca(self.pca, p.pca)
        save_ortho(self.ortho, p.ortho)
        with open(p.dade_eps, "w") as f:
            json.dump({"eps": self.dade_eps.tolist()}, f)
        if self.codebook is not None:
            save_codebook(self.codebook, p.pq)

    @classmethod
    def load(cls, paths: ArtifactPaths) -> "ArtifactSet":
        arts = cls(paths=paths)
        if os.path.exists(paths.pca):
            arts.pca = load_pca(paths.pca)
        if os.path.exists(paths.ortho):
            arts.ortho = load_ortho(paths.ortho)
        if os.path.exists(paths.dade_eps):
            with open(paths.dade_eps, "r") as f:
                arts.dade_eps = np.asarray(json.load(f)["eps"], dtype=np.float64)
        if os.path.exists(paths.pq):
            arts.codebook = load_codebook(paths.pq)
        for name, (json_path, bin_path) in paths.models.items():
            if os.path.exists(json_path) and os.path.exists(bin_path):
                _, arts.models[name] = load_models(json_path, bin_path)
                with open(json_path, "r") as f:
                    arts.trained_index[name] = json.load(f).get("index")
        return arts


def fit_preprocess(cfg: BenchConfig, base: Dataset, paths: Optional[ArtifactPaths] = None) -> ArtifactSet:
    """PCA, random projection, DADE eps schedule and PQ codebook for one base set."""
    start = time.perf_counter()
    dco_cfg = cfg.dco
    print(f"🔨 Fitting PCA on up to {dco_cfg['pca_sample']} of {base.n} vectors")
    pca = fit_pca(base, max_rows=dco_cfg["pca_sample"], seed=cfg.seed_for("pca"))
    ortho = random_orthogonal(base.dim, cfg.seed_for("ortho"))
    print(f"🔨 Calibrating DADE eps at alpha={dco_cfg['alpha']} over {dco_cfg['dade_pairs']} pairs")
    dade_eps = calibrate_dade(
        pca.rotate_rows(base.vectors, center=True),
        pca.eigen_prefix,
        alpha=dco_cfg["alpha"],
        n_pairs=dco_cfg["dade_pairs"],
        seed=cfg.seed_for("dade"),
    )
    c = cfg.pq["c"] or default_subspaces(base.dim)
    b = cfg.pq["b"]
    codebook = None
    if base.dim % c:
        raise ConfigError(f"Field 'pq.c'={c} must divide D={base.dim}")
    if base.n >= 1 << b:
        print(f"🔨 Training PQ codebook c={c}, b={b}")
        codebook = train_pq(base, c, b, seed=cfg.seed_for("pq"))
        print(f"📊 PQ mean squared reconstruction error: {codebook.error:.6g}")
    else:
        print(f"⚠️ Skipping PQ: N={base.n} < 2^b={1 << b}; DDCopq will be unavailable")
    print(f"✅ Preprocessing done in {time.perf_counter() - start:.1f}s")
    return ArtifactSet(pca, ortho, dade_eps, codebook, paths=paths)


def build_index(cfg: BenchConfig, base: Dataset, arts: ArtifactSet, strategy_name: Optional[str] = None):
    """Build the configured index kind; HNSW construction runs its beam through strategy_name."""
    start = time.perf_counter()
    if cfg.index == "ivf":
        print(f"🔨 Building IVF with nlist={cfg.ivf['nlist']}")
        idx = build_ivf(base, cfg.ivf["nlist"], seed=cfg.seed_for("ivf"))
    else:
        name = strategy_name or cfg.hnsw.get("build_strategy", "FDScanning")
        strategy = arts.strategy(name, base.vectors, cfg)
        print(f"🔨 Building HNSW M={cfg.hnsw['M']} efC={cfg.hnsw['ef_construction']} with {strategy.name}")
        idx = build_hnsw(base, cfg.hnsw["M"], cfg.hnsw["ef_construction"], strategy, seed=cfg.seed_for("hnsw"))
    print(f"✅ Built {cfg.index} over {base.n} vectors in {time.perf_counter() - start:.1f}s")
    return idx


def save_index(idx, paths: ArtifactPaths) -> str:
    paths.ensure_dir()
    path = paths.index(idx.kind)
    if idx.kind == "hnsw":
        save_hnsw(idx, path)
    else:
        save_ivf(idx, path)
    return path


def load_index(cfg: BenchConfig, paths: ArtifactPaths, base: Dataset):
    path = paths.index(cfg.index)
    if not os.path.exists(path):
        raise _missing(path, "build", f"A {cfg.index} search")
    idx = load_hnsw(path) if cfg.index == "hnsw" else load_ivf(path)
    if idx.n != base.n or idx.dim != base.dim:
        raise ConfigError(f"Index {path} covers {idx.n}x{idx.dim}, dataset is {base.n}x{base.dim}; rerun 'build'")
    return idx


def train_classifiers(cfg: BenchConfig, base: Dataset, index, arts: ArtifactSet, kinds=None,
                      save: bool = True) -> Dict[str, dict]:
    """Generate samples on index and fit the DDCpca / DDCopq model sets."""
    kinds = list(kinds or cfg.classification_strategies or [DDC_PCA, DDC_OPQ])
    t = cfg.train
    if base.n < t["classifier_min_vectors"]:
        print(f"⚠️ Training classifiers on {base.n} vectors (< {t['classifier_min_vectors']} recommended)")
    pca = arts._require(arts.pca, arts.paths.pca, "preprocess", DDC_PCA) if DDC_PCA in kinds else None
    codebook = arts._require(arts.codebook, arts.paths.pq, "preprocess", DDC_OPQ) if DDC_OPQ in kinds else None
    value = t["ef_search"] if index.kind == "hnsw" else t["nprobe"]
    sched = ScanSchedule(cfg.dco["delta0"], cfg.dco["delta_d"])
    print(f"🔄 Generating training samples: {t['n_queries']} queries, ks={cfg.train_ks}")
    sample_sets = gen_training_samples(
        index,
        base,
        cfg.train_ks,
        t["n_queries"],
        sched,
        seed=cfg.seed_for("train"),
        pca=pca,
        codebook=codebook,
        search_value=value,
        sample_rate=t.get("sample_rate", 1.0),
    )
    trained = {}
    for kind, samples in sample_sets.items():
        models = fit_models(samples, seed=cfg.seed_for(f"fit-{kind}"))
        trained[kind] = models
        arts.models[kind] = models
        arts.trained_index[kind] = index.kind
        if save:
            arts.paths.ensure_dir()
            json_path, bin_path = arts.paths.models[kind]
            save_models(models, kind, json_path, bin_path, extra={"index": index.kind})
            if t.get("dump_samples"):
                dump_samples_csv(samples, arts.paths.samples_csv(kind))
    return trained
