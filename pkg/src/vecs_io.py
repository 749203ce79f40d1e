#!/usr/bin/env python3
"""
fvecs / ivecs readers and writers, plus seeded synthetic dataset generators.

Both formats are a sequence of records: a little-endian int32 d followed by d
little-endian 32-bit payload values (float for fvecs, int for ivecs).
"""

import os

import numpy as np

from core import Dataset

GAUSSIAN = "isotropic-gaussian"
LOW_RANK = "low-rank"
CONCAT_TOKENS = "concat-tokens"
DISTRIBUTIONS = (GAUSSIAN, LOW_RANK, CONCAT_TOKENS)

LOW_RANK_NOISE = 0.01
DEFAULT_TOKEN_POOL = 1024


def _read_records(path: str) -> np.ndarray:
    """(n, d + 1) int32 record matrix; column 0 holds d."""
    if os.path.getsize(path) % 4:
        raise ValueError(f"Truncated vecs file {path}: size is not a multiple of 4 bytes")
    raw = np.fromfile(path, dtype="<i4")
    if raw.size == 0:
        return raw.reshape(0, 1)
    dim = int(raw[0])
    if dim < 1:
        raise ValueError(f"Vecs file {path}: record 0 declares d={dim}")
    width = dim + 1
    whole = raw.size // width
    headers = raw[: whole * width].reshape(whole, width)[:, 0]
    bad = np.flatnonzero(headers != dim)
    if len(bad):
        i = int(bad[0])
        raise ValueError(f"Vecs file {path}: record {i} has d={int(headers[i])}, expected {dim}")
    if raw.size % width:
        raise ValueError(f"Truncated vecs file {path}: record {whole} is incomplete")
    return raw.reshape(whole, width)


def read_fvecs(path: str) -> Dataset:
    records = _read_records(path)
    if records.shape[0] == 0:
        raise ValueError(f"fvecs file {path} is empty")
    vectors = records[:, 1:].copy().view("<f4").astype(np.float32)
    finite = np.isfinite(vectors).all(axis=1)
    if not finite.all():
        i = int(np.flatnonzero(~finite)[0])
        raise ValueError(f"fvecs file {path}: record {i} has a NaN or Inf value")
    return Dataset(vectors, name=os.path.basename(path))


def write_fvecs(data, path: str):
    vectors = data.vectors if isinstance(data, Dataset) else np.asarray(data, dtype=np.float32)
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    records = np.empty((vectors.shape[0], vectors.shape[1] + 1), dtype="<i4")
    records[:, 0] = vectors.shape[1]
    records[:, 1:] = vectors.view("<i4")
    records.tofile(path)


def read_ivecs(path: str) -> np.ndarray:
    """(n, d) int32 matrix; an empty file gives shape (0, 0)."""
    records = _read_records(path)
    if records.shape[0] == 0:
        return np.zeros((0, 0), dtype=np.int32)
    return records[:, 1:].astype(np.int32)


def write_ivecs(ids, path: str):
    ids = np.ascontiguousarray(ids, dtype="<i4")
    if ids.ndim != 2:
        raise ValueError(f"ivecs payload must be 2-D, got shape {ids.shape}")
    records = np.empty((ids.shape[0], ids.shape[1] + 1), dtype="<i4")
    records[:, 0] = ids.shape[1]
    records[:, 1:] = ids
    records.tofile(path)


class SyntheticSpec:
    def __init__(self, n: int, dim: int, distribution: str = GAUSSIAN, seed: int = 0, rank=None, token_dim=None,
                 token_pool: int = DEFAULT_TOKEN_POOL):
        if n < 1 or dim < 1:
            raise ValueError(f"Synthetic spec needs n >= 1 and dim >= 1, got n={n}, dim={dim}")
        if distribution not in DISTRIBUTIONS:
            raise ValueError(f"Unknown distribution '{distribution}', expected one of {', '.join(DISTRIBUTIONS)}")
        if distribution == LOW_RANK and (rank is None or not 1 <= rank <= dim):
            raise ValueError(f"low-rank data needs 1 <= rank <= dim={dim}, got {rank}")
        if distribution == CONCAT_TOKENS:
            if token_dim is None or token_dim < 1 or dim % token_dim:
                raise ValueError(f"concat-tokens needs a token_dim dividing dim={dim}, got {token_dim}")
            if token_pool < 1:
                raise ValueError(f"token_pool must be >= 1, got {token_pool}")
        self.n = int(n)
        self.dim = int(dim)
        self.distribution = distribution
        self.seed = int(seed)
        self.rank = rank
        self.token_dim = token_dim
        self.token_pool = int(token_pool)

    @classmethod
    def from_dict(cls, raw: dict, seed: int = 0) -> "SyntheticSpec":
        known = {"n", "dim", "distribution", "rank", "token_dim", "token_pool", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"Unknown synthetic spec fields: {', '.join(sorted(unknown))}")
        fields = dict(raw)
        fields.setdefault("seed", seed)
        return cls(**fields)

    def describe(self) -> str:
        extra = {LOW_RANK: f", r={self.rank}", CONCAT_TOKENS: f", token_dim={self.token_dim}"}
        return f"{self.distribution}(N={self.n}, D={self.dim}{extra.get(self.distribution, '')}, seed={self.seed})"


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    if spec.distribution == GAUSSIAN:
        x = rng.standard_normal((spec.n, spec.dim))
    elif spec.distribution == LOW_RANK:
        z = rng.standard_normal((spec.n, spec.rank))
        basis = rng.standard_normal((spec.rank, spec.dim))
        x = z @ basis + LOW_RANK_NOISE * rng.standard_normal((spec.n, spec.dim))
    else:
        pool = rng.standard_normal((spec.token_pool, spec.token_dim))
        picks = rng.integers(0, spec.token_pool, size=(spec.n, spec.dim // spec.token_dim))
        x = pool[picks].reshape(spec.n, spec.dim)
    return Dataset(x.astype(np.float32), name=spec.describe())
