#!/usr/bin/env python3
"""
Dataset representation, exact distance kernels, the brute-force oracle and recall.

Every distance in the toolkit lives in the squared Euclidean domain. The kernels
accumulate in float32: dimensions are summed in blocks of BLOCK terms, blocks are
summed in groups of BLOCK blocks (256 terms) and the group sums are folded left to
right. Because every addition is of non-negative terms along a fixed tree, the sum
over a zero-padded prefix never exceeds the sum over the whole vector, which is what
lets the partial scans in dco.py prune without ever disagreeing with a full scan.
"""

import hashlib
from typing import List, Optional

import numpy as np

BLOCK = 16

EUCLIDEAN = "euclidean"
INNER_PRODUCT = "ip"
COSINE = "cosine"
METRICS = (EUCLIDEAN, INNER_PRODUCT, COSINE)

NORM_TOLERANCE = 1e-4


class ConfigError(ValueError):
    """A configuration problem: bad field, unknown name, or a missing artifact."""


def _padded_len(n: int) -> int:
    return -(-n // BLOCK) * BLOCK


def fold_squares(sq: np.ndarray) -> float:
    """Sum a float32 vector of squared terms with the blocked accumulation order."""
    n = sq.shape[0]
    if n == 0:
        return 0.0
    padded = _padded_len(n)
    if padded != n:
        sq = np.concatenate([sq, np.zeros(padded - n, dtype=np.float32)])
    blocks = sq.reshape(-1, BLOCK).sum(axis=1, dtype=np.float32)
    nb = blocks.shape[0]
    nb_padded = _padded_len(nb)
    if nb_padded != nb:
        blocks = np.concatenate([blocks, np.zeros(nb_padded - nb, dtype=np.float32)])
    groups = blocks.reshape(-1, BLOCK).sum(axis=1, dtype=np.float32)
    return float(np.add.accumulate(groups, dtype=np.float32)[-1])


def fold_squares_rows(sq: np.ndarray) -> np.ndarray:
    """Row-wise fold_squares for an (n, D) float32 matrix."""
    n, dim = sq.shape
    if dim == 0:
        return np.zeros(n, dtype=np.float32)
    padded = _padded_len(dim)
    if padded != dim:
        sq = np.concatenate([sq, np.zeros((n, padded - dim), dtype=np.float32)], axis=1)
    blocks = sq.reshape(n, -1, BLOCK).sum(axis=2, dtype=np.float32)
    nb = blocks.shape[1]
    nb_padded = _padded_len(nb)
    if nb_padded != nb:
        blocks = np.concatenate([blocks, np.zeros((n, nb_padded - nb), dtype=np.float32)], axis=1)
    groups = blocks.reshape(n, -1, BLOCK).sum(axis=2, dtype=np.float32)
    return np.add.accumulate(groups, axis=1, dtype=np.float32)[:, -1]


def _as_vector(v) -> np.ndarray:
    return np.ascontiguousarray(v, dtype=np.float32).reshape(-1)


class Dataset:
    """N vectors of dimension D stored as one contiguous float32 matrix; ids are row numbers."""

    def __init__(self, vectors, normalized: Optional[bool] = None, name: str = "dataset"):
        data = np.ascontiguousarray(vectors, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"Dataset expects a 2-D array, got shape {data.shape}")
        n, dim = data.shape
        if n < 1 or dim < 1:
            raise ValueError(f"Dataset needs N >= 1 and D >= 1, got N={n}, D={dim}")
        finite = np.isfinite(data).all(axis=1)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise ValueError(f"Dataset vector {bad} has a NaN or Inf coordinate")
        data.setflags(write=False)
        self.vectors = data
        self.name = name
        if normalized is None:
            norms = np.linalg.norm(data.astype(np.float64), axis=1)
            normalized = bool(np.all(np.abs(norms - 1.0) <= NORM_TOLERANCE))
        self.normalized = normalized

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, vid: int) -> np.ndarray:
        return self.vectors[vid]

    def subset(self, ids) -> "Dataset":
        return Dataset(self.vectors[np.asarray(ids)], name=f"{self.name}[subset]")

    def fingerprint(self) -> str:
        """Content hash used in run manifests."""
        h = hashlib.sha256()
        h.update(np.asarray(self.vectors.shape, dtype="<u8").tobytes())
        h.update(self.vectors.astype("<f4").tobytes())
        return h.hexdigest()


class KnnResult:
    """k ids with ascending distances (ties ordered by ascending id)."""

    def __init__(self, ids, dists):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.dists = np.asarray(dists, dtype=np.float64)
        if self.ids.shape != self.dists.shape:
            raise ValueError("KnnResult ids and dists must have the same length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("KnnResult ids must be distinct")
        if np.any(np.diff(self.dists) < 0):
            raise ValueError("KnnResult dists must be non-decreasing")

    @classmethod
    def from_pairs(cls, pairs, k: int) -> "KnnResult":
        """Build from (dist, id) pairs, keeping the k smallest by (dist, id)."""
        best = sorted(pairs)[:k]
        return cls([p[1] for p in best], [p[0] for p in best])

    @property
    def k(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __repr__(self) -> str:
        return f"KnnResult(ids={self.ids.tolist()}, dists={self.dists.tolist()})"


def squared_euclidean(a, b) -> float:
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"Dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    diff = a - b
    return fold_squares(diff * diff)


def partial_sq_dist(a, b, start: int, stop: int) -> float:
    """Squared distance restricted to dimensions [start, stop)."""
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"Dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if not 0 <= start <= stop <= a.shape[0]:
        raise ValueError(f"Invalid dimension range [{start}, {stop}) for D={a.shape[0]}")
    diff = a[start:stop] - b[start:stop]
    return fold_squares(diff * diff)


def sq_dists_to(vectors: np.ndarray, q) -> np.ndarray:
    """Squared distances from q to every row, same accumulation order as squared_euclidean."""
    q = _as_vector(q)
    if vectors.shape[1] != q.shape[0]:
        raise ValueError(f"Dimension mismatch: {vectors.shape[1]} vs {q.shape[0]}")
    diff = vectors - q
    return fold_squares_rows(diff * diff)


def check_metric(ds: Dataset, metric: str):
    if metric not in METRICS:
        raise ValueError(f"Unknown metric '{metric}', expected one of {', '.join(METRICS)}")
    if metric != EUCLIDEAN and not ds.normalized:
        raise ValueError(f"Metric '{metric}' requires a normalized dataset")


def metric_distances(ds: Dataset, q, metric: str = EUCLIDEAN) -> np.ndarray:
    """Distance of every vector to q; smaller is closer for every metric."""
    check_metric(ds, metric)
    q = _as_vector(q)
    if q.shape[0] != ds.dim:
        raise ValueError(f"Dimension mismatch: dataset D={ds.dim}, query D={q.shape[0]}")
    if metric == EUCLIDEAN:
        return sq_dists_to(ds.vectors, q).astype(np.float64)
    qq = q.astype(np.float64)
    if metric == COSINE:
        norm = np.linalg.norm(qq)
        if norm == 0:
            raise ValueError("Cosine distance is undefined for a zero query")
        qq = qq / norm
    return 1.0 - ds.vectors.astype(np.float64) @ qq


def brute_force_knn(ds: Dataset, q, k: int, metric: str = EUCLIDEAN) -> KnnResult:
    if k < 1 or k > ds.n:
        raise ValueError(f"k={k} must be in [1, N={ds.n}]")
    dists = metric_distances(ds, q, metric)
    ids = np.arange(ds.n)
    order = np.lexsort((ids, dists))[:k]
    return KnnResult(order, dists[order])


def recall(result: KnnResult, truth: KnnResult, k: int) -> float:
    if len(result) != k or len(truth) != k:
        raise ValueError(f"recall@{k} needs {k} entries, got {len(result)} and {len(truth)}")
    return len(set(result.ids.tolist()) & set(truth.ids.tolist())) / k


def tie_aware_recall(result_ids, result_dists, truth: KnnResult, k: int, tol: float = 1e-6) -> float:
    """Recall where an id outside truth still matches when its distance ties truth's k-th."""
    if len(truth) < k:
        raise ValueError(f"Ground truth has {len(truth)} entries, need {k}")
    truth_ids = set(truth.ids[:k].tolist())
    kth = truth.dists[k - 1]
    hits = 0
    for vid, dist in list(zip(result_ids, result_dists))[:k]:
        if int(vid) in truth_ids or abs(dist - kth) <= tol:
            hits += 1
    return min(hits, k) / k


def ground_truth(ds: Dataset, queries: np.ndarray, k: int, metric: str = EUCLIDEAN) -> List[KnnResult]:
    return [brute_force_knn(ds, q, k, metric) for q in queries]


def distances_to_ids(vectors: np.ndarray, q, ids, metric: str = EUCLIDEAN) -> np.ndarray:
    """metric_distances restricted to the rows in ids, in the order given."""
    rows = vectors[np.asarray(ids, dtype=np.int64)]
    q = _as_vector(q)
    if metric == EUCLIDEAN:
        return sq_dists_to(rows, q).astype(np.float64) if len(rows) else np.zeros(0)
    return 1.0 - rows.astype(np.float64) @ q.astype(np.float64)
