#!/usr/bin/env python3
"""
Inverted file index: k-means partitions stored as contiguous id runs.

search() probes the nprobe partitions whose centroids are nearest the raw query and
hands every member to strategy.compare() with tau_sq = the current k-th best distance
(+inf until k candidates are held).
"""

import heapq
from typing import Tuple

import numpy as np

from core import Dataset, KnnResult, _as_vector, sq_dists_to
from dco import DcoStats, Strategy
from hnsw import SearchParams
from quantize import KMEANS_ITERATIONS, assign, kmeans
from sidecar import KIND_IVF, SidecarReader, SidecarWriter

INF = float("inf")


class IvfIndex:
    kind = "ivf"

    def __init__(self, centroids, labels):
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        self.labels = labels
        # Ids grouped by partition; partition p is order[offsets[p]:offsets[p + 1]].
        self.order = np.argsort(labels, kind="stable").astype(np.int64)
        counts = np.bincount(labels, minlength=self.nlist)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def __len__(self) -> int:
        return self.n

    def partition(self, p: int) -> np.ndarray:
        return self.order[self.offsets[p]:self.offsets[p + 1]]

    def partition_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def probe_order(self, q, nprobe: int) -> np.ndarray:
        dists = sq_dists_to(self.centroids, q)
        return np.lexsort((np.arange(self.nlist), dists))[:nprobe]

    def search(self, q, params: SearchParams, strategy: Strategy) -> Tuple[KnnResult, DcoStats]:
        k = params.k
        if k > self.n:
            raise ValueError(f"k={k} exceeds index size N={self.n}")
        nprobe = params.nprobe or 1
        if not 1 <= nprobe <= self.nlist:
            raise ValueError(f"nprobe={nprobe} must be in [1, nlist={self.nlist}]")
        if strategy.n != self.n or strategy.dim != self.dim:
            raise ValueError(f"Strategy holds {strategy.n}x{strategy.dim}, index is {self.n}x{self.dim}")
        q = _as_vector(q)
        stats = DcoStats()
        ctx = strategy.prepare(q, k)
        stats.preproc_seconds = ctx.preproc_seconds
        heap = []  # (-dist, -id): the worst kept result on top
        for p in self.probe_order(q, nprobe):
            for vid in self.partition(p).tolist():
                full = len(heap) >= k
                out = strategy.compare(ctx, vid, -heap[0][0] if full else INF)
                stats.record(out)
                if not out.within:
                    continue
                if not full:
                    heapq.heappush(heap, (-out.distance, -vid))
                elif (out.distance, vid) < (-heap[0][0], -heap[0][1]):
                    heapq.heapreplace(heap, (-out.distance, -vid))
        return KnnResult.from_pairs([(-d, -v) for d, v in heap], k), stats


def build_ivf(ds: Dataset, nlist: int, seed: int = 0, n_iter: int = KMEANS_ITERATIONS) -> IvfIndex:
    if nlist < 1 or nlist > ds.n:
        raise ValueError(f"nlist={nlist} must be in [1, N={ds.n}]")
    # Assign against the stored float32 centroids so labels match what a reload sees.
    centroids = kmeans(ds.vectors, nlist, n_iter=n_iter, seed=seed).astype(np.float32)
    labels, _ = assign(ds.vectors, centroids)
    return IvfIndex(centroids, labels)


def search_ivf(idx: IvfIndex, q, params: SearchParams, strategy: Strategy):
    return idx.search(q, params, strategy)


def save_ivf(idx: IvfIndex, path: str):
    with open(path, "wb") as f:
        w = SidecarWriter(f)
        w.header(idx.dim, KIND_IVF)
        w.u32(idx.nlist)
        w.u32(idx.n)
        w.floats(idx.centroids)
        w.ints(idx.labels)


def load_ivf(path: str) -> IvfIndex:
    with open(path, "rb") as f:
        r = SidecarReader(f, path)
        dim = r.header(KIND_IVF)
        nlist = r.u32()
        n = r.u32()
        centroids = r.floats(nlist * dim, (nlist, dim))
        labels = r.ints(n)
        r.expect_end()
    if n and (labels.min() < 0 or labels.max() >= nlist):
        raise ValueError(f"{path}: partition label outside [0, {nlist})")
    return IvfIndex(centroids, labels)
