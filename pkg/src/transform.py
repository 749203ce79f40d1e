#!/usr/bin/env python3
"""
Offline rotations and normalizations used by the non-trivial DCO strategies.

Both rotation artifacts are square: the methods here rotate the space, they never
reduce it, so scanning the first d rotated coordinates is the d-row projection for
every d at once.
"""

import numpy as np

from core import Dataset, _as_vector
from sidecar import KIND_ORTHO, KIND_PCA, SidecarReader, SidecarWriter

DEFAULT_PCA_SAMPLE = 100000
MAX_SQ_DIS = 4.0 + 1e-4


class PcaModel:
    """Mean, loading matrix (principal directions as columns) and eigenvalues, descending."""

    kind = "pca"

    def __init__(self, mean, loading, eigenvalues):
        self.mean = _as_vector(mean)
        self.loading = np.ascontiguousarray(loading, dtype=np.float32)
        self.eigenvalues = np.maximum(_as_vector(eigenvalues), np.float32(0.0))
        dim = self.mean.shape[0]
        if self.loading.shape != (dim, dim) or self.eigenvalues.shape[0] != dim:
            raise ValueError(
                f"Inconsistent PCA shapes: mean {self.mean.shape}, loading {self.loading.shape}, "
                f"eigenvalues {self.eigenvalues.shape}"
            )
        lam = self.eigenvalues.astype(np.float64)
        self.eigen_prefix = np.concatenate([[0.0], np.cumsum(lam)])
        self.sigma = np.sqrt(lam)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def rotate(self, v, center: bool = True) -> np.ndarray:
        v = _as_vector(v)
        if v.shape[0] != self.dim:
            raise ValueError(f"Dimension mismatch: model D={self.dim}, vector D={v.shape[0]}")
        x = v.astype(np.float64)
        if center:
            x = x - self.mean
        return (x @ self.loading.astype(np.float64)).astype(np.float32)

    def rotate_rows(self, vectors, center: bool = True) -> np.ndarray:
        x = np.asarray(vectors, dtype=np.float64)
        if x.shape[1] != self.dim:
            raise ValueError(f"Dimension mismatch: model D={self.dim}, vectors D={x.shape[1]}")
        if center:
            x = x - self.mean
        return np.ascontiguousarray((x @ self.loading.astype(np.float64)).astype(np.float32))

    def unrotate(self, r, center: bool = True) -> np.ndarray:
        x = _as_vector(r).astype(np.float64) @ self.loading.astype(np.float64).T
        if center:
            x = x + self.mean
        return x.astype(np.float32)

    def explained_ratio(self, d: int) -> float:
        total = self.eigen_prefix[-1]
        return 1.0 if total <= 0 else float(self.eigen_prefix[d] / total)


class OrthoProjection:
    """Seeded random orthogonal D x D matrix; rows are the projection directions."""

    kind = "ortho"

    def __init__(self, matrix, seed: int):
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError(f"Projection must be square, got {self.matrix.shape}")
        self.seed = int(seed)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def rotate(self, v, center: bool = False) -> np.ndarray:
        v = _as_vector(v)
        if v.shape[0] != self.dim:
            raise ValueError(f"Dimension mismatch: projection D={self.dim}, vector D={v.shape[0]}")
        return (self.matrix.astype(np.float64) @ v.astype(np.float64)).astype(np.float32)

    def rotate_rows(self, vectors, center: bool = False) -> np.ndarray:
        x = np.asarray(vectors, dtype=np.float64)
        if x.shape[1] != self.dim:
            raise ValueError(f"Dimension mismatch: projection D={self.dim}, vectors D={x.shape[1]}")
        return np.ascontiguousarray((x @ self.matrix.astype(np.float64).T).astype(np.float32))


def fit_pca(sample: Dataset, max_rows: int = DEFAULT_PCA_SAMPLE, seed: int = 0) -> PcaModel:
    """Covariance eigendecomposition over at most max_rows sampled vectors."""
    if sample.n < 2:
        raise ValueError(f"PCA needs at least 2 vectors, got {sample.n}")
    x = sample.vectors
    if sample.n > max_rows:
        rng = np.random.default_rng(seed)
        rows = np.sort(rng.choice(sample.n, size=max_rows, replace=False))
        x = x[rows]
    x = x.astype(np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigenvalues, vectors = np.linalg.eigh(cov)
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    vectors = vectors[:, order]
    # Fix each column's sign so the fit is reproducible across LAPACK builds.
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    vectors = vectors * signs
    return PcaModel(mean, vectors, eigenvalues)


def random_orthogonal(dim: int, seed: int) -> OrthoProjection:
    if dim < 1:
        raise ValueError(f"Projection dimension must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    gaussian = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(gaussian)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return OrthoProjection(q * signs, seed)


def apply_rotation(model, v, center: bool = True) -> np.ndarray:
    """W^T (v - mu) for a PcaModel (mu dropped when center is False), P v for a projection."""
    return model.rotate(v, center=center)


def normalize_dataset(ds: Dataset) -> Dataset:
    x = ds.vectors.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise ValueError(f"Cannot normalize zero vector at id {int(zero[0])}")
    return Dataset((x / norms[:, None]).astype(np.float32), normalized=True, name=f"{ds.name}[normalized]")


def normalize_rows(vectors) -> np.ndarray:
    return normalize_dataset(Dataset(vectors)).vectors


def ip_from_sq_euclidean(sq_dis: float) -> float:
    """Inner product of two unit vectors from their squared Euclidean distance."""
    if not 0.0 <= sq_dis <= MAX_SQ_DIS:
        raise ValueError(
            f"Squared distance {sq_dis} outside [0, 4] for unit vectors; inputs are not normalized"
        )
    return 1.0 - 0.5 * sq_dis


def save_pca(model: PcaModel, path: str):
    with open(path, "wb") as f:
        w = SidecarWriter(f)
        w.header(model.dim, KIND_PCA)
        w.floats(model.mean)
        w.floats(model.eigenvalues)
        w.floats(model.loading)


def load_pca(path: str) -> PcaModel:
    with open(path, "rb") as f:
        r = SidecarReader(f, path)
        dim = r.header(KIND_PCA)
        mean = r.floats(dim)
        eigenvalues = r.floats(dim)
        loading = r.floats(dim * dim, (dim, dim))
        r.expect_end()
    return PcaModel(mean, loading, eigenvalues)


def save_ortho(proj: OrthoProjection, path: str):
    with open(path, "wb") as f:
        w = SidecarWriter(f)
        w.header(proj.dim, KIND_ORTHO)
        w.u64(proj.seed)
        w.floats(proj.matrix)


def load_ortho(path: str) -> OrthoProjection:
    with open(path, "rb") as f:
        r = SidecarReader(f, path)
        dim = r.header(KIND_ORTHO)
        seed = r.u64()
        matrix = r.floats(dim * dim, (dim, dim))
        r.expect_end()
    return OrthoProjection(matrix, seed)
