#!/usr/bin/env python3
"""
Distance comparison operations (DCOs).

A DCO answers "is dis(o, q) <= tau?" for one candidate and, when the answer is yes,
also returns the exact squared distance. Every strategy here implements the same
contract:

    strategy = make_strategy("ADSampling", vectors, ortho=proj)
    ctx = strategy.prepare(q, k=20)          # per-query work (rotations, tables)
    out = strategy.compare(ctx, vid, tau_sq)  # DcoOutcome

Each strategy owns a copy of the data in its own space (raw, PCA-rotated or randomly
projected) so the index never has to know which rotation is active. Tests only fire
at the depths listed by a ScanSchedule; the last depth is always D, where every
strategy falls back to the exact comparison.
"""

import math
import time
from typing import NamedTuple, Optional

import numpy as np

from core import BLOCK, ConfigError, _as_vector, fold_squares
from quantize import build_lookup_table, encode_rows, lookup_distance

FD_SCANNING = "FDScanning"
PD_SCANNING = "PDScanning"
PD_SCANNING_PLUS = "PDScanningPlus"
AD_SAMPLING = "ADSampling"
DADE = "DADE"
DDC_RES = "DDCres"
DDC_PCA = "DDCpca"
DDC_OPQ = "DDCopq"

STRATEGIES = (FD_SCANNING, PD_SCANNING, PD_SCANNING_PLUS, AD_SAMPLING, DADE, DDC_RES, DDC_PCA, DDC_OPQ)
EXACT_STRATEGIES = (FD_SCANNING, PD_SCANNING, PD_SCANNING_PLUS)
HYPOTHESIS_STRATEGIES = (AD_SAMPLING, DADE, DDC_RES)
CLASSIFICATION_STRATEGIES = (DDC_PCA, DDC_OPQ)

_ALIASES = {name.lower(): name for name in STRATEGIES}
_ALIASES["pdscanning+"] = PD_SCANNING_PLUS

ABOVE = "Above"
WITHIN = "Within"

DEFAULT_EPS0 = 2.1
DEFAULT_ALPHA = 0.05
DEFAULT_M = 3.0


def canonical_strategy(name: str) -> str:
    """Resolve a strategy name case-insensitively."""
    try:
        return _ALIASES[str(name).strip().lower()]
    except KeyError:
        raise ValueError(f"Unknown strategy '{name}'. Valid strategies: {', '.join(STRATEGIES)}")


class ScanSchedule:
    """Test depths delta0, delta0 + delta_d, ... capped at D."""

    def __init__(self, delta0: int = 32, delta_d: int = 32):
        if delta0 < 1 or delta_d < 1:
            raise ValueError(f"Scan schedule needs delta0 >= 1 and delta_d >= 1, got {delta0}, {delta_d}")
        self.delta0 = int(delta0)
        self.delta_d = int(delta_d)

    def depths(self, dim: int) -> list:
        # Steps larger than D are clamped so small-D datasets still get a schedule.
        depths = []
        d = min(self.delta0, dim)
        while d < dim:
            depths.append(d)
            d += self.delta_d
        depths.append(dim)
        return depths

    def __repr__(self) -> str:
        return f"ScanSchedule(delta0={self.delta0}, delta_d={self.delta_d})"


class HypothesisParams:
    def __init__(self, ads_epsilon0=DEFAULT_EPS0, dade_alpha=DEFAULT_ALPHA, dade_eps=None, ddcres_m=DEFAULT_M):
        if ads_epsilon0 <= 0:
            raise ValueError(f"ads_epsilon0 must be > 0, got {ads_epsilon0}")
        if not 0 < dade_alpha < 1:
            raise ValueError(f"dade_alpha must be in (0, 1), got {dade_alpha}")
        if ddcres_m <= 0:
            raise ValueError(f"ddcres_m must be > 0, got {ddcres_m}")
        self.ads_epsilon0 = float(ads_epsilon0)
        self.dade_alpha = float(dade_alpha)
        self.dade_eps = None if dade_eps is None else np.asarray(dade_eps, dtype=np.float64)
        if self.dade_eps is not None and (np.any(self.dade_eps < 0) or not np.all(np.isfinite(self.dade_eps))):
            raise ValueError("dade_eps entries must be finite and >= 0")
        self.ddcres_m = float(ddcres_m)


class DcoOutcome(NamedTuple):
    decision: str
    distance: Optional[float]
    dims_scanned: int
    code_ops: int = 0

    @property
    def within(self) -> bool:
        return self.decision == WITHIN


def _above(dims: int, code_ops: int = 0) -> DcoOutcome:
    return DcoOutcome(ABOVE, None, dims, code_ops)


def _exact(full: float, tau_sq: float, dims: int, code_ops: int = 0) -> DcoOutcome:
    if full <= tau_sq:
        return DcoOutcome(WITHIN, full, dims, code_ops)
    return DcoOutcome(ABOVE, None, dims, code_ops)


class DcoStats:
    """Counters over a run of compare() calls."""

    def __init__(self):
        self.invocations = 0
        self.dims_scanned = 0
        self.within = 0
        self.above = 0
        self.code_ops = 0
        self.preproc_seconds = 0.0

    def record(self, outcome: DcoOutcome):
        self.invocations += 1
        self.dims_scanned += outcome.dims_scanned
        self.code_ops += outcome.code_ops
        if outcome.decision == WITHIN:
            self.within += 1
        else:
            self.above += 1

    def merge(self, other: "DcoStats"):
        self.invocations += other.invocations
        self.dims_scanned += other.dims_scanned
        self.within += other.within
        self.above += other.above
        self.code_ops += other.code_ops
        self.preproc_seconds += other.preproc_seconds

    def scan_fraction(self, dim: int) -> float:
        if self.invocations == 0:
            return 0.0
        return self.dims_scanned / (dim * self.invocations)

    def __repr__(self) -> str:
        return (
            f"DcoStats(invocations={self.invocations}, dims={self.dims_scanned}, "
            f"within={self.within}, above={self.above}, code_ops={self.code_ops})"
        )


class QueryContext:
    """Per-query state; built by Strategy.prepare and confined to one search."""

    def __init__(self, q, rotated, k=None):
        self.q = q
        self.rotated = rotated
        self.k = k
        self.q_norm_sq = None
        self.tail_var = None
        self.scale = None
        self.lut = None
        self.preproc_seconds = 0.0


def _prefix_sq(o: np.ndarray, q: np.ndarray, d: int) -> float:
    diff = o[:d] - q[:d]
    return fold_squares(diff * diff)


def fd_scan(o, q, tau_sq: float) -> DcoOutcome:
    o = _as_vector(o)
    q = _as_vector(q)
    if o.shape != q.shape:
        raise ValueError(f"Dimension mismatch: {o.shape[0]} vs {q.shape[0]}")
    dim = o.shape[0]
    return _exact(_prefix_sq(o, q, dim), tau_sq, dim)


def pd_scan(o, q, tau_sq: float, sched: ScanSchedule, depths=None) -> DcoOutcome:
    """Prune as soon as the running partial distance exceeds tau_sq."""
    o = _as_vector(o)
    q = _as_vector(q)
    if o.shape != q.shape:
        raise ValueError(f"Dimension mismatch: {o.shape[0]} vs {q.shape[0]}")
    dim = o.shape[0]
    if math.isinf(tau_sq):
        return _exact(_prefix_sq(o, q, dim), tau_sq, dim)
    for d in depths or sched.depths(dim):
        partial = _prefix_sq(o, q, d)
        if partial > tau_sq:
            return _above(d)
    return DcoOutcome(WITHIN, partial, dim)


def pd_scan_plus(o_rot, q_rot, tau_sq: float, sched: ScanSchedule, depths=None) -> DcoOutcome:
    """pd_scan over PCA-rotated vectors, where the leading dims carry most of the distance."""
    return pd_scan(o_rot, q_rot, tau_sq, sched, depths)


def ads_test(partial_sq: float, d: int, dim: int, tau_sq: float, eps0: float) -> bool:
    """True when the scaled partial distance rejects dis <= tau."""
    if d < 1 or d > dim:
        raise ValueError(f"ADSampling test depth {d} outside [1, {dim}]")
    estimate = dim / d * partial_sq
    eps = eps0 / math.sqrt(d)
    return estimate > (1.0 + eps) ** 2 * tau_sq


def dade_test(partial_sq: float, d: int, ctx: QueryContext, tau_sq: float, params: HypothesisParams) -> bool:
    if ctx.scale is None or params.dade_eps is None:
        raise ConfigError("DADE test needs PCA eigenvalues and a calibrated eps schedule")
    estimate = ctx.scale[d] * partial_sq
    return estimate > (1.0 + params.dade_eps[d]) ** 2 * tau_sq


def ddcres_test(cross_partial: float, d: int, ctx: QueryContext, tau_sq: float, m: float, norms) -> bool:
    if ctx.tail_var is None:
        raise ConfigError("DDCres test needs the PCA sigma table")
    o_norm_sq, q_norm_sq = norms
    dis_sq = o_norm_sq + q_norm_sq - 2.0 * cross_partial
    estimate = dis_sq - 2.0 * m * math.sqrt(ctx.tail_var[d])
    return estimate > tau_sq


def scale_factors(eigen_prefix: np.ndarray) -> np.ndarray:
    """scale[d] = prefix[D] / prefix[d]; falls back to D/d when the data has no variance."""
    dim = len(eigen_prefix) - 1
    depth = np.arange(dim + 1, dtype=np.float64)
    scale = np.ones(dim + 1)
    total = eigen_prefix[-1]
    if total <= 0:
        scale[1:] = dim / depth[1:]
        return scale
    with np.errstate(divide="ignore"):
        scale[1:] = np.where(eigen_prefix[1:] > 0, total / eigen_prefix[1:], np.inf)
    scale[dim] = 1.0
    return scale


def tail_variances(q_rot: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """tail_var[d] = sum over i >= d of (q_i sigma_i)^2, with tail_var[D] == 0."""
    terms = (q_rot.astype(np.float64) * sigma) ** 2
    tail = np.zeros(len(terms) + 1)
    tail[:-1] = np.cumsum(terms[::-1])[::-1]
    # Keep the table non-increasing under rounding.
    return np.minimum.accumulate(tail)


class Strategy:
    """Base class: owns the stored vectors and the scan schedule."""

    name = None
    exact = False
    classification = False
    center = False

    def __init__(self, vectors, sched: Optional[ScanSchedule] = None):
        raw = np.ascontiguousarray(vectors, dtype=np.float32)
        if raw.ndim != 2 or raw.shape[1] < 1:
            raise ValueError(f"Strategy expects an (N, D) matrix, got shape {raw.shape}")
        self.dim = raw.shape[1]
        self.sched = sched or ScanSchedule()
        self.depths = self.sched.depths(self.dim)
        self.store = self._to_space(raw)

    def _to_space(self, vectors: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(vectors, dtype=np.float32)

    def _query_space(self, q: np.ndarray) -> np.ndarray:
        return q

    @property
    def n(self) -> int:
        return self.store.shape[0]

    def extend(self, vectors):
        """Append vectors inserted into the index after construction."""
        vectors = np.ascontiguousarray(vectors, dtype=np.float32).reshape(-1, self.dim)
        self.store = np.ascontiguousarray(np.vstack([self.store, self._to_space(vectors)]))

    def prepare(self, q, k: Optional[int] = None) -> QueryContext:
        start = time.perf_counter()
        q = _as_vector(q)
        if q.shape[0] != self.dim:
            raise ValueError(f"Dimension mismatch: strategy D={self.dim}, query D={q.shape[0]}")
        ctx = QueryContext(q, self._query_space(q), k)
        self._prepare(ctx)
        ctx.preproc_seconds = time.perf_counter() - start
        return ctx

    def _prepare(self, ctx: QueryContext):
        pass

    def full_distance(self, ctx: QueryContext, vid: int) -> float:
        return _prefix_sq(self.store[vid], ctx.rotated, self.dim)

    def compare(self, ctx: QueryContext, vid: int, tau_sq: float) -> DcoOutcome:
        if tau_sq < 0:
            raise ValueError(f"tau_sq must be >= 0, got {tau_sq}")
        if math.isinf(tau_sq):
            return DcoOutcome(WITHIN, self.full_distance(ctx, vid), self.dim, self._code_ops())
        return self._compare(ctx, vid, tau_sq)

    def _code_ops(self) -> int:
        return 0

    def _compare(self, ctx, vid, tau_sq):
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{self.name}(N={self.n}, D={self.dim}, {self.sched})"


class FDScanningStrategy(Strategy):
    name = FD_SCANNING
    exact = True

    def _compare(self, ctx, vid, tau_sq):
        return _exact(self.full_distance(ctx, vid), tau_sq, self.dim)


class PDScanningStrategy(Strategy):
    name = PD_SCANNING
    exact = True

    def _compare(self, ctx, vid, tau_sq):
        return pd_scan(self.store[vid], ctx.rotated, tau_sq, self.sched, self.depths)


class _RotatedStrategy(Strategy):
    """Strategies that scan in a rotated space; the rotation is applied once per query."""

    rotation_kind = "pca"

    def __init__(self, vectors, rotation, sched=None):
        if rotation is None:
            raise ConfigError(f"{self.name} requires a {self.rotation_kind.upper()} rotation artifact")
        self.rotation = rotation
        super().__init__(vectors, sched)
        if rotation.dim != self.dim:
            raise ValueError(f"Rotation D={rotation.dim} does not match data D={self.dim}")

    def _to_space(self, vectors):
        return self.rotation.rotate_rows(vectors, center=self.center)

    def _query_space(self, q):
        return self.rotation.rotate(q, center=self.center)


class PDScanningPlusStrategy(_RotatedStrategy):
    name = PD_SCANNING_PLUS
    exact = True
    center = True

    def _compare(self, ctx, vid, tau_sq):
        return pd_scan_plus(self.store[vid], ctx.rotated, tau_sq, self.sched, self.depths)


class ADSamplingStrategy(_RotatedStrategy):
    name = AD_SAMPLING
    rotation_kind = "ortho"

    def __init__(self, vectors, ortho, sched=None, eps0: float = DEFAULT_EPS0):
        super().__init__(vectors, ortho, sched)
        self.eps0 = float(eps0)

    def _compare(self, ctx, vid, tau_sq):
        o = self.store[vid]
        for d in self.depths[:-1]:
            if ads_test(_prefix_sq(o, ctx.rotated, d), d, self.dim, tau_sq, self.eps0):
                return _above(d)
        return _exact(self.full_distance(ctx, vid), tau_sq, self.dim)


class DADEStrategy(_RotatedStrategy):
    name = DADE
    center = True

    def __init__(self, vectors, pca, params: HypothesisParams, sched=None):
        super().__init__(vectors, pca, sched)
        if params.dade_eps is None:
            raise ConfigError("DADE requires a calibrated eps schedule (dade_eps.json)")
        if len(params.dade_eps) != self.dim + 1:
            raise ConfigError(
                f"DADE eps schedule covers D={len(params.dade_eps) - 1}, data has D={self.dim}"
            )
        self.params = params
        self.scale = scale_factors(pca.eigen_prefix)

    def _prepare(self, ctx):
        ctx.scale = self.scale

    def _compare(self, ctx, vid, tau_sq):
        o = self.store[vid]
        for d in self.depths[:-1]:
            if dade_test(_prefix_sq(o, ctx.rotated, d), d, ctx, tau_sq, self.params):
                return _above(d)
        return _exact(self.full_distance(ctx, vid), tau_sq, self.dim)


class DDCresStrategy(_RotatedStrategy):
    name = DDC_RES
    center = True

    def __init__(self, vectors, pca, sched=None, m: float = DEFAULT_M):
        super().__init__(vectors, pca, sched)
        self.m = float(m)
        self.norms = self._norms(self.store)

    @staticmethod
    def _norms(rotated):
        x = rotated.astype(np.float64)
        return np.einsum("ij,ij->i", x, x)

    def extend(self, vectors):
        super().extend(vectors)
        self.norms = self._norms(self.store)

    def _prepare(self, ctx):
        q = ctx.rotated.astype(np.float64)
        ctx.q_norm_sq = float(q @ q)
        ctx.tail_var = tail_variances(ctx.rotated, self.rotation.sigma)

    def _compare(self, ctx, vid, tau_sq):
        o = self.store[vid]
        norms = (self.norms[vid], ctx.q_norm_sq)
        for d in self.depths[:-1]:
            cross = float(o[:d].astype(np.float64) @ ctx.rotated[:d].astype(np.float64))
            if ddcres_test(cross, d, ctx, tau_sq, self.m, norms):
                return _above(d)
        return _exact(self.full_distance(ctx, vid), tau_sq, self.dim)


def pca_features(partial_sq: float, tau_sq: float, d: int, dim: int) -> np.ndarray:
    return np.array([partial_sq, tau_sq, d / dim], dtype=np.float64)


def opq_features(pq_dist: float, tau_sq: float) -> np.ndarray:
    return np.array([pq_dist, tau_sq], dtype=np.float64)


class DDCpcaStrategy(_RotatedStrategy):
    """One linear model per (k, depth); a positive score rejects."""

    name = DDC_PCA
    center = True
    classification = True

    def __init__(self, vectors, pca, models: dict, sched=None):
        super().__init__(vectors, pca, sched)
        if not models:
            raise ConfigError("DDCpca requires trained models (ddcpca_models.json)")
        self.models = models
        self.ks = sorted({k for k, _ in models})
        for k in self.ks:
            missing = [d for d in self.depths[:-1] if (k, d) not in models]
            if missing:
                raise ConfigError(f"DDCpca has no model for k={k} at depths {missing}; retrain with this schedule")

    def _prepare(self, ctx):
        if ctx.k not in self.ks:
            raise ConfigError(f"DDCpca has no models for k={ctx.k}; trained ks: {self.ks}")

    def _compare(self, ctx, vid, tau_sq):
        o = self.store[vid]
        for d in self.depths[:-1]:
            partial = _prefix_sq(o, ctx.rotated, d)
            if self.models[(ctx.k, d)].score(pca_features(partial, tau_sq, d, self.dim)) > 0:
                return _above(d)
        return _exact(self.full_distance(ctx, vid), tau_sq, self.dim)


class DDCopqStrategy(Strategy):
    """One PQ-distance prediction per candidate, in the original space."""

    name = DDC_OPQ
    classification = True

    def __init__(self, vectors, codebook, models: dict, codes=None, sched=None):
        if codebook is None:
            raise ConfigError("DDCopq requires a PQ codebook (pq.bin)")
        if not models:
            raise ConfigError("DDCopq requires trained models (ddcopq_models.json)")
        super().__init__(vectors, sched)
        if codebook.dim != self.dim:
            raise ValueError(f"Codebook D={codebook.dim} does not match data D={self.dim}")
        self.codebook = codebook
        self.models = models
        self.codes = encode_rows(codebook, self.store) if codes is None else np.asarray(codes)
        if self.codes.shape != (self.n, codebook.c):
            raise ConfigError(f"PQ codes shape {self.codes.shape} does not match N={self.n}, c={codebook.c}")
        self._subspaces = np.arange(codebook.c)

    def extend(self, vectors):
        before = self.n
        super().extend(vectors)
        self.codes = np.vstack([self.codes, encode_rows(self.codebook, self.store[before:])])

    def _prepare(self, ctx):
        if ctx.k not in self.models:
            raise ConfigError(f"DDCopq has no model for k={ctx.k}; trained ks: {sorted(self.models)}")
        ctx.lut = build_lookup_table(self.codebook, ctx.q)

    def _code_ops(self):
        return self.codebook.c

    def pq_distance(self, ctx, vid) -> float:
        return lookup_distance(ctx.lut, self.codes[vid], self._subspaces)

    def _compare(self, ctx, vid, tau_sq):
        c = self.codebook.c
        features = opq_features(self.pq_distance(ctx, vid), tau_sq)
        if self.models[ctx.k].score(features) > 0:
            return _above(0, c)
        return _exact(self.full_distance(ctx, vid), tau_sq, self.dim, c)


_CLASSES = {
    FD_SCANNING: FDScanningStrategy,
    PD_SCANNING: PDScanningStrategy,
    PD_SCANNING_PLUS: PDScanningPlusStrategy,
    AD_SAMPLING: ADSamplingStrategy,
    DADE: DADEStrategy,
    DDC_RES: DDCresStrategy,
    DDC_PCA: DDCpcaStrategy,
    DDC_OPQ: DDCopqStrategy,
}


def make_strategy(
    name,
    vectors,
    sched: Optional[ScanSchedule] = None,
    params: Optional[HypothesisParams] = None,
    pca=None,
    ortho=None,
    codebook=None,
    codes=None,
    pca_models=None,
    opq_models=None,
) -> Strategy:
    """Build a strategy by name; artifacts it needs but did not get raise ConfigError."""
    name = canonical_strategy(name)
    params = params or HypothesisParams()
    if name in (FD_SCANNING, PD_SCANNING):
        return _CLASSES[name](vectors, sched)
    if name == PD_SCANNING_PLUS:
        return PDScanningPlusStrategy(vectors, pca, sched)
    if name == AD_SAMPLING:
        return ADSamplingStrategy(vectors, ortho, sched, params.ads_epsilon0)
    if name == DADE:
        return DADEStrategy(vectors, pca, params, sched)
    if name == DDC_RES:
        return DDCresStrategy(vectors, pca, sched, params.ddcres_m)
    if name == DDC_PCA:
        return DDCpcaStrategy(vectors, pca, pca_models, sched)
    return DDCopqStrategy(vectors, codebook, opq_models, codes, sched)


def compare(strategy: Strategy, ctx: QueryContext, vid: int, tau_sq: float) -> DcoOutcome:
    return strategy.compare(ctx, vid, tau_sq)


DEPTH_CHUNK = 8 * BLOCK
PAIR_CHUNK = 2048


def calibrate_dade(rotated, eigen_prefix, alpha: float = DEFAULT_ALPHA, n_pairs: int = 100000, seed: int = 0):
    """
    Empirical per-depth eps for DADE.

    Samples (o, q) pairs from the rotated data and sets eps[d] to the (1 - alpha)
    quantile of sqrt(scale[d] * partial / full) minus one, clamped at zero.

    Args:
        rotated: (N, D) centered PCA-rotated data
        eigen_prefix: PcaModel.eigen_prefix (length D + 1)
        alpha: significance level
        n_pairs: number of sampled pairs
        seed: RNG seed

    Returns:
        float64 array of length D + 1; entry d is eps for test depth d
    """
    rotated = np.asarray(rotated, dtype=np.float32)
    n, dim = rotated.shape
    if n < 2:
        raise ValueError(f"DADE calibration needs at least 2 vectors, got {n}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    rng = np.random.default_rng(seed)
    a = rng.integers(0, n, size=n_pairs)
    b = rng.integers(0, n, size=n_pairs)
    keep = a != b
    a, b = a[keep], b[keep]
    scale = scale_factors(np.asarray(eigen_prefix, dtype=np.float64))
    eps = np.zeros(dim + 1)
    for lo in range(1, dim + 1, DEPTH_CHUNK):
        hi = min(lo + DEPTH_CHUNK, dim + 1)
        ratios = []
        for s in range(0, len(a), PAIR_CHUNK):
            diff = rotated[a[s:s + PAIR_CHUNK]].astype(np.float64) - rotated[b[s:s + PAIR_CHUNK]]
            cum = np.cumsum(diff * diff, axis=1)
            full = cum[:, -1]
            ok = full > 0
            ratios.append(np.sqrt(scale[lo:hi] * cum[ok, lo - 1:hi - 1] / full[ok, None]))
        r = np.concatenate(ratios)
        if r.shape[0] == 0:
            raise ValueError("DADE calibration found no pair of distinct vectors")
        eps[lo:hi] = np.maximum(np.quantile(r, 1.0 - alpha, axis=0) - 1.0, 0.0)
    eps[dim] = 0.0
    return eps
