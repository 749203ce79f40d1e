#!/usr/bin/env python3
"""
Offline training for the classification strategies (DDCpca, DDCopq).

Samples come from real index searches: queries drawn from the dataset are searched
with an exact recording strategy, and every DCO with a finite threshold yields one
sample per scheduled depth (DDCpca) or one PQ-distance sample (DDCopq). Labels are the
exact answer to dis <= tau, never a prediction.

Models are weighted logistic regressions fitted by full-batch gradient descent in
torch; a positive score means "predict above".
"""

import csv
import json
import math
import os
from typing import Dict, List, NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from core import Dataset
from dco import (
    DDC_OPQ,
    DDC_PCA,
    ScanSchedule,
    Strategy,
    _exact,
    _prefix_sq,
    opq_features,
    pca_features,
)
from hnsw import SearchParams
from quantize import build_lookup_table, encode_rows, lookup_distance
from sidecar import KIND_LINEAR, SidecarReader, SidecarWriter

MIN_TRAIN_QUERIES = 100
MIN_FIT_SAMPLES = 200
RECOMMENDED_SAMPLES = 10000
OPQ_DEPTH = 0

WITHIN_WEIGHT = 5.0
HELD_OUT_FRACTION = 0.2
MAX_FALSE_REJECT = 0.10
LEARNING_RATE = 1.0
GD_ITERATIONS = 1000

FEATURE_NAMES = {
    DDC_PCA: ["partial_sq", "tau_sq", "depth_ratio"],
    DDC_OPQ: ["pq_distance", "tau_sq"],
}


class TrainingSample(NamedTuple):
    qid: int
    k: int
    d: int
    features: tuple
    within: bool


class SampleSet:
    """Column-oriented samples of one kind, sorted by (query id, k, depth)."""

    def __init__(self, kind: str, qid, k, d, features, within):
        self.kind = kind
        self.feature_names = FEATURE_NAMES[kind]
        qid = np.asarray(qid, dtype=np.int64)
        k = np.asarray(k, dtype=np.int64)
        d = np.asarray(d, dtype=np.int64)
        features = np.asarray(features, dtype=np.float64).reshape(-1, len(self.feature_names))
        within = np.asarray(within, dtype=bool)
        order = np.lexsort((d, k, qid))
        self.qid = qid[order]
        self.k = k[order]
        self.d = d[order]
        self.features = features[order]
        self.within = within[order]

    def __len__(self) -> int:
        return self.qid.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield TrainingSample(
                int(self.qid[i]), int(self.k[i]), int(self.d[i]), tuple(self.features[i]), bool(self.within[i])
            )

    def keys(self) -> List[tuple]:
        pairs = np.unique(np.stack([self.k, self.d], axis=1), axis=0) if len(self) else []
        return [(int(k), int(d)) for k, d in pairs]

    def select(self, k: int, d: Optional[int] = None):
        mask = self.k == k
        if d is not None:
            mask &= self.d == d
        return self.features[mask], self.within[mask]


class _SampleRecorder(Strategy):
    """Exact raw-space strategy that records training features on every finite-tau DCO."""

    name = "SampleRecorder"
    exact = True

    def __init__(self, vectors, sched: ScanSchedule, pca=None, codebook=None, sample_rate: float = 1.0, seed: int = 0):
        super().__init__(vectors, sched)
        self.pca = pca
        self.codebook = codebook
        self.rotated = pca.rotate_rows(self.store, center=True) if pca is not None else None
        self.codes = encode_rows(codebook, self.store) if codebook is not None else None
        self.sample_rate = sample_rate
        self._rng = np.random.default_rng(seed)
        self.qid = -1
        self.pca_rows = []
        self.opq_rows = []

    def _prepare(self, ctx):
        ctx.pca_q = self.pca.rotate(ctx.q, center=True) if self.pca is not None else None
        if self.codebook is not None:
            ctx.lut = build_lookup_table(self.codebook, ctx.q)

    def _compare(self, ctx, vid, tau_sq):
        full = self.full_distance(ctx, vid)
        if self.sample_rate >= 1.0 or self._rng.random() < self.sample_rate:
            within = full <= tau_sq
            if self.rotated is not None:
                o = self.rotated[vid]
                for d in self.depths:
                    partial = _prefix_sq(o, ctx.pca_q, d)
                    self.pca_rows.append((self.qid, ctx.k, d, pca_features(partial, tau_sq, d, self.dim), within))
            if self.codes is not None:
                pq_dist = lookup_distance(ctx.lut, self.codes[vid])
                self.opq_rows.append((self.qid, ctx.k, OPQ_DEPTH, opq_features(pq_dist, tau_sq), within))
        return _exact(full, tau_sq, self.dim)


def _rows_to_set(kind: str, rows) -> SampleSet:
    width = len(FEATURE_NAMES[kind])
    if not rows:
        return SampleSet(kind, [], [], [], np.zeros((0, width)), [])
    qid, k, d, feats, within = zip(*rows)
    return SampleSet(kind, qid, k, d, np.stack(feats), within)


def search_params_for(index, k: int, value: int) -> SearchParams:
    if index.kind == "hnsw":
        return SearchParams(k, ef_search=max(value, k))
    return SearchParams(k, nprobe=min(value, index.nlist))


def gen_training_samples(
    index,
    ds: Dataset,
    ks,
    n_queries: int,
    sched: ScanSchedule,
    seed: int = 0,
    pca=None,
    codebook=None,
    search_value: int = 200,
    sample_rate: float = 1.0,
) -> Dict[str, SampleSet]:
    """
    Replay index searches for queries sampled from ds and record training samples.

    Args:
        index: HnswIndex or IvfIndex built over ds
        ds: the indexed dataset; queries are drawn from it
        ks: k values to search with
        n_queries: number of sampled queries (at least 100)
        sched: scan schedule whose depths DDCpca samples are taken at
        seed: controls query sampling and sub-sampling
        pca: PcaModel; enables DDCpca samples
        codebook: PqCodebook; enables DDCopq samples
        search_value: ef_search (HNSW) or nprobe (IVF) used while recording
        sample_rate: fraction of DCOs recorded

    Returns:
        dict of strategy name -> SampleSet
    """
    if n_queries < MIN_TRAIN_QUERIES:
        raise ValueError(f"Training needs n_queries >= {MIN_TRAIN_QUERIES}, got {n_queries}")
    if pca is None and codebook is None:
        raise ValueError("Training samples need a PCA model (DDCpca) or a PQ codebook (DDCopq)")
    if index.n != ds.n:
        raise ValueError(f"Index holds {index.n} vectors, dataset has {ds.n}")
    if not 0 < sample_rate <= 1:
        raise ValueError(f"sample_rate must be in (0, 1], got {sample_rate}")
    rng = np.random.default_rng(seed)
    qids = rng.choice(ds.n, size=n_queries, replace=n_queries > ds.n)
    recorder = _SampleRecorder(ds.vectors, sched, pca, codebook, sample_rate, seed + 1)
    for k in ks:
        params = search_params_for(index, k, search_value)
        for qid in qids.tolist():
            recorder.qid = qid
            index.search(ds.vectors[qid], params, recorder)
    result = {}
    if pca is not None:
        result[DDC_PCA] = _rows_to_set(DDC_PCA, recorder.pca_rows)
    if codebook is not None:
        result[DDC_OPQ] = _rows_to_set(DDC_OPQ, recorder.opq_rows)
    for kind, samples in result.items():
        print(f"📊 {kind}: {len(samples)} training samples from {n_queries} queries x {len(ks)} k values")
        if len(samples) < RECOMMENDED_SAMPLES:
            print(f"⚠️ {kind}: only {len(samples)} samples (< {RECOMMENDED_SAMPLES}); models may be unreliable")
    return result


class LinearModel:
    """score(x) = weights . x + bias over raw features; score > 0 predicts above."""

    def __init__(
        self,
        weights,
        bias: float,
        trained_k: int,
        trained_d: Optional[int] = None,
        held_out_accuracy: float = 0.0,
        false_reject_rate: float = 0.0,
        n_samples: int = 0,
        degenerate: bool = False,
        baseline_accuracy: float = 0.0,
    ):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)
        if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)):
            raise ValueError("LinearModel parameters must be finite")
        if not 0.0 <= held_out_accuracy <= 1.0:
            raise ValueError(f"held_out_accuracy must be in [0, 1], got {held_out_accuracy}")
        self.trained_k = int(trained_k)
        self.trained_d = None if trained_d is None else int(trained_d)
        self.held_out_accuracy = float(held_out_accuracy)
        self.false_reject_rate = float(false_reject_rate)
        self.n_samples = int(n_samples)
        self.degenerate = bool(degenerate)
        # Held-out accuracy of always predicting the majority class.
        self.baseline_accuracy = float(baseline_accuracy)

    def score(self, features) -> float:
        return float(np.dot(self.weights, features) + self.bias)

    def scores(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias

    def predict_above(self, x) -> np.ndarray:
        return self.scores(x) > 0

    def __repr__(self) -> str:
        return (
            f"LinearModel(k={self.trained_k}, d={self.trained_d}, "
            f"acc={self.held_out_accuracy:.3f}, base={self.baseline_accuracy:.3f}, fr={self.false_reject_rate:.3f})"
        )


def logistic_loss_and_grad(params: torch.Tensor, z: torch.Tensor, target: torch.Tensor, weight: torch.Tensor):
    """Weighted mean logistic loss and its analytic gradient; params = [w..., b]."""
    s = z @ params[:-1] + params[-1]
    total = weight.sum()
    loss = F.binary_cross_entropy_with_logits(s, target, weight=weight, reduction="sum") / total
    g = weight * (torch.sigmoid(s) - target) / total
    grad = torch.cat([z.T @ g, g.sum().reshape(1)])
    return loss, grad


def gradient_check(x, within, n_points: int = 10, seed: int = 0, h: float = 1e-6) -> float:
    """Max abs difference between analytic and central finite-difference gradients."""
    z, target, weight = _tensors(np.asarray(x, dtype=np.float64), np.asarray(within, dtype=bool))
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_points):
            params = torch.randn(z.shape[1] + 1, generator=gen, dtype=torch.float64)
            _, grad = logistic_loss_and_grad(params, z, target, weight)
            for i in range(params.shape[0]):
                step = torch.zeros_like(params)
                step[i] = h
                up, _ = logistic_loss_and_grad(params + step, z, target, weight)
                down, _ = logistic_loss_and_grad(params - step, z, target, weight)
                numeric = (up - down).item() / (2 * h)
                worst = max(worst, abs(numeric - grad[i].item()))
    return worst


def _tensors(z: np.ndarray, within: np.ndarray):
    target = torch.from_numpy((~within).astype(np.float64))
    weight = torch.from_numpy(np.where(within, WITHIN_WEIGHT, 1.0))
    return torch.from_numpy(np.ascontiguousarray(z)), target, weight


def _false_reject_rate(scores: np.ndarray, within: np.ndarray) -> float:
    if not within.any():
        return 0.0
    return float(np.mean(scores[within] > 0))


def fit_linear(x, within, k: int, d: Optional[int] = None, seed: int = 0) -> LinearModel:
    """
    Fit one classifier with a 5x penalty on false rejects.

    Features are standardized for the descent and folded back into raw-space weights.
    The bias is then lowered until the held-out false-reject rate is at most 10%.
    """
    x = np.asarray(x, dtype=np.float64)
    within = np.asarray(within, dtype=bool)
    n = x.shape[0]
    if n < MIN_FIT_SAMPLES:
        raise ValueError(f"Model (k={k}, d={d}) needs >= {MIN_FIT_SAMPLES} samples, got {n}")
    if within.all() or not within.any():
        only = "within" if within.all() else "above"
        raise ValueError(f"Model (k={k}, d={d}) has only '{only}' samples; both classes are required")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_hold = max(1, int(round(HELD_OUT_FRACTION * n)))
    hold, fit = perm[:n_hold], perm[n_hold:]
    if within[fit].all() or not within[fit].any():
        raise ValueError(f"Model (k={k}, d={d}) training split lost a class; add samples")

    mean = x[fit].mean(axis=0)
    std = x[fit].std(axis=0)
    degenerate = bool(np.all(std == 0))
    std = np.where(std > 0, std, 1.0)
    if degenerate:
        print(f"⚠️ Model (k={k}, d={d}): every feature is constant, the fit reduces to the class prior")

    z, target, weight = _tensors((x[fit] - mean) / std, within[fit])
    params = torch.zeros(x.shape[1] + 1, dtype=torch.float64)
    with torch.no_grad():
        for _ in range(GD_ITERATIONS):
            _, grad = logistic_loss_and_grad(params, z, target, weight)
            params -= LEARNING_RATE * grad
    w_std = params[:-1].numpy()
    weights = w_std / std
    bias = float(params[-1].item() - np.sum(w_std * mean / std))

    hold_x, hold_within = x[hold], within[hold]
    scores = hold_x @ weights + bias
    if _false_reject_rate(scores, hold_within) > MAX_FALSE_REJECT:
        s = np.sort(scores[hold_within])
        cut = s[int(math.ceil((1.0 - MAX_FALSE_REJECT) * len(s))) - 1]
        bias -= cut + 1e-9 * max(1.0, abs(cut))
        scores = hold_x @ weights + bias
    predicted_above = scores > 0
    accuracy = float(np.mean(predicted_above == ~hold_within))
    majority = float(np.mean(hold_within))
    return LinearModel(
        weights,
        bias,
        k,
        d,
        held_out_accuracy=accuracy,
        false_reject_rate=_false_reject_rate(scores, hold_within),
        n_samples=n,
        degenerate=degenerate,
        baseline_accuracy=max(majority, 1.0 - majority),
    )


def fit_opq_model(samples: SampleSet, k: int, seed: int = 0) -> LinearModel:
    if samples.kind != DDC_OPQ:
        raise ValueError(f"fit_opq_model expects DDCopq samples, got {samples.kind}")
    x, within = samples.select(k)
    return fit_linear(x, within, k, None, seed)


def fit_models(samples: SampleSet, seed: int = 0) -> dict:
    """All models for one sample set: keyed (k, d) for DDCpca, k for DDCopq."""
    models = {}
    if samples.kind == DDC_OPQ:
        for k in sorted({k for k, _ in samples.keys()}):
            models[k] = fit_opq_model(samples, k, seed)
            print(f"✅ {DDC_OPQ} k={k}: {models[k]}")
        return models
    for k, d in samples.keys():
        x, within = samples.select(k, d)
        models[(k, d)] = fit_linear(x, within, k, d, seed)
    for k in sorted({k for k, _ in models}):
        accs = [m.held_out_accuracy for (mk, _), m in models.items() if mk == k]
        print(f"✅ {DDC_PCA} k={k}: {len(accs)} depth models, held-out accuracy {min(accs):.3f}-{max(accs):.3f}")
    return models


def save_models(models: dict, kind: str, json_path: str, bin_path: str, extra: Optional[dict] = None):
    """Text manifest (k, d, metrics) plus weights in the sidecar format, same order."""
    names = FEATURE_NAMES[kind]
    keys = sorted(models, key=lambda key: key if isinstance(key, tuple) else (key, OPQ_DEPTH))
    manifest = {"kind": kind, "feature_names": names, "weights_file": os.path.basename(bin_path)}
    manifest.update(extra or {})
    manifest["models"] = []
    with open(bin_path, "wb") as f:
        w = SidecarWriter(f)
        w.header(len(names), KIND_LINEAR)
        w.u32(len(keys))
        for key in keys:
            m = models[key]
            w.f64(m.bias)
            w.doubles(m.weights)
            manifest["models"].append(
                {
                    "k": m.trained_k,
                    "d": m.trained_d,
                    "held_out_accuracy": m.held_out_accuracy,
                    "false_reject_rate": m.false_reject_rate,
                    "n_samples": m.n_samples,
                    "degenerate": m.degenerate,
                    "baseline_accuracy": m.baseline_accuracy,
                }
            )
    with open(json_path, "w") as f:
        json.dump(manifest, f, indent=2)


def load_models(json_path: str, bin_path: str):
    with open(json_path, "r") as f:
        manifest = json.load(f)
    kind = manifest["kind"]
    n_features = len(FEATURE_NAMES[kind])
    models = {}
    with open(bin_path, "rb") as f:
        r = SidecarReader(f, bin_path)
        if r.header(KIND_LINEAR) != n_features:
            raise ValueError(f"{bin_path}: feature count does not match a {kind} model set")
        count = r.u32()
        if count != len(manifest["models"]):
            raise ValueError(f"{bin_path} holds {count} models, {json_path} lists {len(manifest['models'])}")
        for entry in manifest["models"]:
            bias = r.f64()
            weights = r.doubles(n_features)
            m = LinearModel(
                weights,
                bias,
                entry["k"],
                entry["d"],
                entry["held_out_accuracy"],
                entry["false_reject_rate"],
                entry["n_samples"],
                entry["degenerate"],
                entry.get("baseline_accuracy", 0.0),
            )
            models[(m.trained_k, m.trained_d) if kind == DDC_PCA else m.trained_k] = m
        r.expect_end()
    return kind, models


def dump_samples_csv(samples: SampleSet, path: str):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["k", "d"] + samples.feature_names + ["label"])
        for k, d, feats, within in zip(samples.k, samples.d, samples.features, samples.within):
            writer.writerow([int(k), int(d)] + [repr(float(v)) for v in feats] + ["within" if within else "above"])
