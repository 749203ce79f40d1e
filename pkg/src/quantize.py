#!/usr/bin/env python3
"""
k-means and product quantization.

kmeans() is shared with the IVF index. The PQ side splits D into c sub-spaces of
D/c dims and trains 2^b centroids per sub-space; a query's asymmetric distance to a
code is the sum of c table lookups.
"""

from typing import Optional

import numpy as np

from core import Dataset, _as_vector
from sidecar import KIND_PQ, SidecarReader, SidecarWriter

KMEANS_ITERATIONS = 25
DEFAULT_BITS = 8
MAX_SUBSPACES = 64
_ASSIGN_CHUNK = 4096


def default_subspaces(dim: int) -> int:
    """c = D/8 capped at 64, falling back to the largest divisor of D not above that."""
    target = max(1, min(dim // 8, MAX_SUBSPACES))
    while dim % target:
        target -= 1
    return target


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) float64 squared distances."""
    xx = np.einsum("ij,ij->i", x, x)[:, None]
    cc = np.einsum("ij,ij->i", centers, centers)[None, :]
    return np.maximum(xx - 2.0 * x @ centers.T + cc, 0.0)


def assign(x, centers) -> tuple:
    """Nearest center per row (ties go to the lowest center index) and its squared distance."""
    x = np.asarray(x, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    labels = np.empty(x.shape[0], dtype=np.int64)
    dists = np.empty(x.shape[0])
    for s in range(0, x.shape[0], _ASSIGN_CHUNK):
        d = _sq_dists(x[s:s + _ASSIGN_CHUNK], centers)
        labels[s:s + _ASSIGN_CHUNK] = np.argmin(d, axis=1)
        dists[s:s + _ASSIGN_CHUNK] = d[np.arange(d.shape[0]), labels[s:s + _ASSIGN_CHUNK]]
    return labels, dists


def _plus_plus(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centers[i] = x[pick]
        closest = np.minimum(closest, _sq_dists(x, centers[i:i + 1])[:, 0])
    return centers


def kmeans(x, k: int, n_iter: int = KMEANS_ITERATIONS, seed: int = 0) -> np.ndarray:
    """Lloyd iterations from k-means++ seeds; empty clusters restart at the farthest point."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k-means needs 1 <= k <= N, got k={k}, N={n}")
    rng = np.random.default_rng(seed)
    centers = _plus_plus(x, k, rng)
    for _ in range(n_iter):
        labels, dists = assign(x, centers)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for empty in np.flatnonzero(~nonempty):
            far = int(np.argmax(dists))
            centers[empty] = x[far]
            dists[far] = -1.0
    return centers


class PqCodebook:
    """c x 2^b x (D/c) centroids."""

    def __init__(self, centroids, b: int, trained_on: str = "", error: Optional[float] = None):
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float32)
        if self.centroids.ndim != 3:
            raise ValueError(f"PQ centroids must be (c, 2^b, sub_dim), got {self.centroids.shape}")
        self.b = int(b)
        if self.centroids.shape[1] != 1 << self.b:
            raise ValueError(f"PQ codebook with b={self.b} needs {1 << self.b} centroids per sub-space")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("PQ centroids must be finite")
        self.trained_on = trained_on
        self.error = error

    @property
    def c(self) -> int:
        return self.centroids.shape[0]

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.c * self.sub_dim

    @property
    def code_dtype(self):
        return np.uint8 if self.b <= 8 else np.uint16

    def __repr__(self) -> str:
        return f"PqCodebook(c={self.c}, b={self.b}, D={self.dim})"


def train_pq(ds: Dataset, c: int, b: int = DEFAULT_BITS, seed: int = 0) -> PqCodebook:
    if c < 1 or ds.dim % c:
        raise ValueError(f"PQ sub-space count c={c} must divide D={ds.dim}")
    if b < 1 or b > 16:
        raise ValueError(f"PQ bits b={b} must be in [1, 16]")
    if ds.n < 1 << b:
        raise ValueError(f"PQ with b={b} needs N >= {1 << b} vectors, got {ds.n}")
    sub_dim = ds.dim // c
    centroids = np.empty((c, 1 << b, sub_dim), dtype=np.float32)
    for s in range(c):
        chunk = ds.vectors[:, s * sub_dim:(s + 1) * sub_dim]
        centroids[s] = kmeans(chunk, 1 << b, seed=seed + s)
    cb = PqCodebook(centroids, b, trained_on=ds.fingerprint())
    cb.error = quantization_error(cb, ds.vectors)
    return cb


def encode_rows(cb: PqCodebook, vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float32).reshape(-1, cb.dim)
    codes = np.empty((x.shape[0], cb.c), dtype=cb.code_dtype)
    for s in range(cb.c):
        sub = x[:, s * cb.sub_dim:(s + 1) * cb.sub_dim]
        codes[:, s] = assign(sub, cb.centroids[s])[0]
    return codes


def encode(cb: PqCodebook, v) -> np.ndarray:
    v = _as_vector(v)
    if v.shape[0] != cb.dim:
        raise ValueError(f"Dimension mismatch: codebook D={cb.dim}, vector D={v.shape[0]}")
    return encode_rows(cb, v[None, :])[0]


def decode(cb: PqCodebook, codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return cb.centroids[np.arange(cb.c), codes].reshape(-1)


def quantization_error(cb: PqCodebook, vectors) -> float:
    """Mean squared reconstruction error."""
    x = np.asarray(vectors, dtype=np.float32)
    codes = encode_rows(cb, x).astype(np.int64)
    recon = cb.centroids[np.arange(cb.c)[None, :], codes].reshape(x.shape[0], -1)
    diff = x.astype(np.float64) - recon
    return float(np.mean(np.einsum("ij,ij->i", diff, diff)))


def build_lookup_table(cb: PqCodebook, q) -> np.ndarray:
    """(c, 2^b) float32 table of squared distances from q's sub-vectors to each centroid."""
    q = _as_vector(q)
    if q.shape[0] != cb.dim:
        raise ValueError(f"Dimension mismatch: codebook D={cb.dim}, query D={q.shape[0]}")
    diff = cb.centroids - q.reshape(cb.c, 1, cb.sub_dim)
    return (diff * diff).sum(axis=2, dtype=np.float32)


def lookup_distance(lut: np.ndarray, codes, subspaces=None) -> float:
    if subspaces is None:
        subspaces = np.arange(lut.shape[0])
    return float(lut[subspaces, np.asarray(codes, dtype=np.int64)].sum(dtype=np.float64))


def pq_distance(cb: PqCodebook, codes, q, lut: Optional[np.ndarray] = None) -> float:
    """Asymmetric squared distance from q to the vector behind codes."""
    if lut is None:
        lut = build_lookup_table(cb, q)
    return lookup_distance(lut, codes)


def naive_pq_distance(cb: PqCodebook, codes, q) -> float:
    """Same as pq_distance, recomputing each sub-space term instead of using a table."""
    q = _as_vector(q)
    terms = np.empty(cb.c, dtype=np.float32)
    for s, code in enumerate(np.asarray(codes, dtype=np.int64)):
        diff = cb.centroids[s, code:code + 1] - q[s * cb.sub_dim:(s + 1) * cb.sub_dim]
        terms[s] = (diff * diff).sum(axis=1, dtype=np.float32)[0]
    return float(terms.sum(dtype=np.float64))


def save_codebook(cb: PqCodebook, path: str):
    with open(path, "wb") as f:
        w = SidecarWriter(f)
        w.header(cb.dim, KIND_PQ)
        w.u32(cb.c)
        w.u32(cb.b)
        w.floats(cb.centroids)


def load_codebook(path: str) -> PqCodebook:
    with open(path, "rb") as f:
        r = SidecarReader(f, path)
        dim = r.header(KIND_PQ)
        c = r.u32()
        b = r.u32()
        if c == 0 or dim % c:
            raise ValueError(f"{path}: sub-space count {c} does not divide D={dim}")
        centroids = r.floats(c * (1 << b) * (dim // c), (c, 1 << b, dim // c))
        r.expect_end()
    return PqCodebook(centroids, b)
