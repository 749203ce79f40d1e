#!/usr/bin/env python3
"""
HNSW graph index whose layer-0 beam runs every distance check through a DCO strategy.

Upper layers hold few nodes and use exact raw-space distances for the greedy descent.
In the layer-0 beam (both at construction and at query time) each candidate is handed
to strategy.compare() with tau_sq = the worst distance retained in the beam, or +inf
while the beam holds fewer than ef entries.
"""

import heapq
import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from core import KnnResult, _as_vector, sq_dists_to
from dco import DcoStats, Strategy
from sidecar import KIND_HNSW, SidecarReader, SidecarWriter

INF = float("inf")
MIN_REACHABLE = 0.99


class SearchParams:
    """k plus the index's search knob: ef_search for HNSW, nprobe for IVF."""

    def __init__(self, k: int, ef_search: Optional[int] = None, nprobe: Optional[int] = None):
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if ef_search is not None and ef_search < k:
            raise ValueError(f"ef_search={ef_search} must be >= k={k}")
        if nprobe is not None and nprobe < 1:
            raise ValueError(f"nprobe must be >= 1, got {nprobe}")
        self.k = int(k)
        self.ef_search = ef_search
        self.nprobe = nprobe

    def __repr__(self) -> str:
        knob = f"ef_search={self.ef_search}" if self.ef_search is not None else f"nprobe={self.nprobe}"
        return f"SearchParams(k={self.k}, {knob})"


class HnswIndex:
    kind = "hnsw"

    def __init__(self, dim: int, M: int = 16, ef_construction: int = 500, seed: int = 0):
        if M < 2:
            raise ValueError(f"HNSW needs M >= 2, got {M}")
        if ef_construction < 1:
            raise ValueError(f"ef_construction must be >= 1, got {ef_construction}")
        self.dim = int(dim)
        self.M = int(M)
        self.M0 = 2 * self.M
        self.ef_construction = int(ef_construction)
        self.seed = int(seed)
        self._rng = np.random.default_rng(seed)
        self._level_mult = 1.0 / math.log(self.M)
        self._data = np.zeros((0, self.dim), dtype=np.float32)
        self.levels: List[int] = []
        # graphs[l][node] -> {neighbor: distance}
        self.graphs: List[Dict[int, Dict[int, float]]] = []
        self.entry_point: Optional[int] = None
        self._visited: List[int] = []
        self._epoch = 0
        self.build_stats = DcoStats()

    @property
    def n(self) -> int:
        return len(self.levels)

    @property
    def vectors(self) -> np.ndarray:
        return self._data[: self.n]

    @property
    def max_level(self) -> int:
        return len(self.graphs) - 1

    def __len__(self) -> int:
        return self.n

    def _append(self, vectors: np.ndarray):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32).reshape(-1, self.dim)
        self._data = np.ascontiguousarray(np.vstack([self._data[: self.n], vectors]))
        self._visited.extend([0] * vectors.shape[0])

    def _next_epoch(self) -> int:
        self._epoch += 1
        return self._epoch

    def _random_level(self) -> int:
        return int(-math.log(1.0 - self._rng.random()) * self._level_mult)

    def _raw_dists(self, ids, q) -> np.ndarray:
        return sq_dists_to(self._data[np.asarray(ids, dtype=np.int64)], q)

    def _greedy(self, q, entry: int, entry_dist: float, layer: Dict[int, Dict[int, float]]) -> Tuple[int, float]:
        """Closest node reachable by greedy descent in one upper layer."""
        candidates = [(entry_dist, entry)]
        visited = {entry}
        best, best_dist = entry, entry_dist
        while candidates:
            dist, cur = heapq.heappop(candidates)
            if dist > best_dist:
                break
            neighbors = [p for p in layer[cur] if p not in visited]
            if not neighbors:
                continue
            visited.update(neighbors)
            for p, d in zip(neighbors, self._raw_dists(neighbors, q)):
                d = float(d)
                if (d, p) < (best_dist, best):
                    best, best_dist = p, d
                    heapq.heappush(candidates, (d, p))
        return best, best_dist

    def _beam_exact(self, q, entries: List[Tuple[float, int]], layer, ef: int) -> List[Tuple[float, int]]:
        """ef-beam in an upper layer with exact distances; returns ascending (dist, id)."""
        candidates = list(entries)
        heapq.heapify(candidates)
        beam = [(-d, -p) for d, p in entries]
        heapq.heapify(beam)
        visited = {p for _, p in entries}
        while candidates:
            dist, cur = heapq.heappop(candidates)
            if dist > -beam[0][0]:
                break
            neighbors = [p for p in layer[cur] if p not in visited]
            if not neighbors:
                continue
            visited.update(neighbors)
            for p, d in zip(neighbors, self._raw_dists(neighbors, q)):
                d = float(d)
                if len(beam) < ef:
                    heapq.heappush(candidates, (d, p))
                    heapq.heappush(beam, (-d, -p))
                elif (d, p) < (-beam[0][0], -beam[0][1]):
                    heapq.heappush(candidates, (d, p))
                    heapq.heapreplace(beam, (-d, -p))
        return sorted((-d, -p) for d, p in beam)

    def _beam_dco(self, ctx, strategy: Strategy, entries: List[int], ef: int, stats: DcoStats) -> List[Tuple[float, int]]:
        """Layer-0 beam where each candidate check is a DCO; returns ascending (dist, id)."""
        epoch = self._next_epoch()
        visited = self._visited
        candidates = []
        beam = []
        for e in entries:
            visited[e] = epoch
            out = strategy.compare(ctx, e, INF)
            stats.record(out)
            heapq.heappush(candidates, (out.distance, e))
            heapq.heappush(beam, (-out.distance, -e))
        graph = self.graphs[0]
        while candidates:
            dist, cur = heapq.heappop(candidates)
            if dist > -beam[0][0]:
                break
            for p in graph[cur]:
                if visited[p] == epoch:
                    continue
                visited[p] = epoch
                full = len(beam) >= ef
                out = strategy.compare(ctx, p, -beam[0][0] if full else INF)
                stats.record(out)
                if not out.within:
                    continue
                if not full:
                    heapq.heappush(candidates, (out.distance, p))
                    heapq.heappush(beam, (-out.distance, -p))
                elif (out.distance, p) < (-beam[0][0], -beam[0][1]):
                    heapq.heappush(candidates, (out.distance, p))
                    heapq.heapreplace(beam, (-out.distance, -p))
        return sorted((-d, -p) for d, p in beam)

    def _prune(self, candidates: List[Tuple[float, int]], max_size: int) -> List[Tuple[float, int]]:
        """Keep a candidate only if it is closer to the base than to every kept neighbor."""
        if len(candidates) <= max_size:
            return sorted(candidates)
        pruned = []
        for cand_dist, cand in sorted(candidates):
            if len(pruned) >= max_size:
                break
            if pruned:
                to_kept = self._raw_dists([p for _, p in pruned], self._data[cand])
                if np.any(to_kept < cand_dist):
                    continue
            pruned.append((cand_dist, cand))
        return pruned

    def _connect(self, vid: int, found: List[Tuple[float, int]], layer: Dict[int, Dict[int, float]], max_size: int):
        layer[vid] = {p: d for d, p in self._prune([(d, p) for d, p in found if p != vid], max_size)}
        for p, d in layer[vid].items():
            edges = layer[p]
            edges[vid] = d
            if len(edges) > max_size:
                layer[p] = {q: dq for dq, q in self._prune([(dq, q) for q, dq in edges.items()], max_size)}

    def _add_node(self, vid: int, strategy: Strategy, stats: DcoStats):
        level = self._random_level()
        self.levels.append(level)
        v = self._data[vid]
        if self.entry_point is not None:
            point = self.entry_point
            dist = float(self._raw_dists([point], v)[0])
            for l in range(self.max_level, level, -1):
                point, dist = self._greedy(v, point, dist, self.graphs[l])
            entries = [(dist, point)]
            for l in range(min(level, self.max_level), 0, -1):
                found = self._beam_exact(v, entries, self.graphs[l], self.ef_construction)
                self._connect(vid, found, self.graphs[l], self.M)
                entries = found
            ctx = strategy.prepare(v)
            stats.preproc_seconds += ctx.preproc_seconds
            found = self._beam_dco(ctx, strategy, [p for _, p in entries], self.ef_construction, stats)
            self._connect(vid, found, self.graphs[0], self.M0)
        for l in range(len(self.graphs)):
            if l <= level:
                self.graphs[l].setdefault(vid, {})
        while len(self.graphs) <= level:
            self.graphs.append({vid: {}})
            self.entry_point = vid
        if self.entry_point is None:
            self.entry_point = vid

    def _check_strategy(self, strategy: Strategy, expected_n: int):
        if strategy.dim != self.dim:
            raise ValueError(f"Strategy D={strategy.dim} does not match index D={self.dim}")
        if strategy.n != expected_n:
            raise ValueError(f"Strategy holds {strategy.n} vectors, index expects {expected_n}")

    def insert(self, v, strategy: Strategy) -> int:
        """Insert one vector; returns its id."""
        return self.insert_batch(_as_vector(v)[None, :], strategy)[0]

    def insert_batch(self, vectors, strategy: Strategy) -> List[int]:
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise ValueError(f"Dimension mismatch: index D={self.dim}, vectors shape {vectors.shape}")
        if strategy.classification:
            raise ValueError(f"{strategy.name} cannot be used to insert: classification strategies need a built index")
        start = self.n
        if strategy.n == start:
            strategy.extend(vectors)
        self._check_strategy(strategy, start + vectors.shape[0])
        self._append(vectors)
        ids = list(range(start, start + vectors.shape[0]))
        for vid in ids:
            self._add_node(vid, strategy, self.build_stats)
        return ids

    def search(self, q, params: SearchParams, strategy: Strategy) -> Tuple[KnnResult, DcoStats]:
        """
        k nearest ids found by the layer-0 DCO beam, ascending by (dist, id).

        The result holds fewer than k entries when fewer than k nodes are reachable from
        the entry point (an index that fails audit). Callers score the missing slots as
        misses.
        """
        if params.k > self.n:
            raise ValueError(f"k={params.k} exceeds index size N={self.n}")
        self._check_strategy(strategy, self.n)
        q = _as_vector(q)
        ef = max(params.ef_search or params.k, params.k)
        stats = DcoStats()
        ctx = strategy.prepare(q, params.k)
        stats.preproc_seconds = ctx.preproc_seconds
        point = self.entry_point
        dist = float(self._raw_dists([point], q)[0])
        for l in range(self.max_level, 0, -1):
            point, dist = self._greedy(q, point, dist, self.graphs[l])
        found = self._beam_dco(ctx, strategy, [point], ef, stats)
        return KnnResult.from_pairs(found, params.k), stats

    def audit(self) -> dict:
        """Check degree bounds, id validity, layer monotonicity and layer-0 reachability."""
        problems = []
        n = self.n
        for l, layer in enumerate(self.graphs):
            bound = self.M0 if l == 0 else self.M
            for node, edges in layer.items():
                if not 0 <= node < n:
                    problems.append(f"layer {l}: invalid node id {node}")
                    continue
                if self.levels[node] < l:
                    problems.append(f"layer {l}: node {node} sits above its level {self.levels[node]}")
                if len(edges) > bound:
                    problems.append(f"layer {l}: node {node} has degree {len(edges)} > {bound}")
                for p in edges:
                    if p not in layer:
                        problems.append(f"layer {l}: edge {node}->{p} leaves the layer")
        for vid, level in enumerate(self.levels):
            for l in range(level + 1):
                if l >= len(self.graphs) or vid not in self.graphs[l]:
                    problems.append(f"node {vid} missing from layer {l}")
                    break
        reachable = 1.0
        if n:
            seen = {self.entry_point}
            stack = [self.entry_point]
            while stack:
                for p in self.graphs[0].get(stack.pop(), {}):
                    if p not in seen:
                        seen.add(p)
                        stack.append(p)
            reachable = len(seen) / n
            if reachable < MIN_REACHABLE:
                problems.append(f"only {reachable:.2%} of layer 0 reachable from entry point")
        return {"ok": not problems, "problems": problems, "reachable_fraction": reachable}


def build_hnsw(ds, M: int, ef_construction: int, strategy: Strategy, seed: int = 0) -> HnswIndex:
    if strategy.classification:
        raise ValueError(
            f"{strategy.name} cannot build an index: classification strategies are trained on a built index"
        )
    idx = HnswIndex(ds.dim, M, ef_construction, seed)
    if strategy.n != ds.n:
        raise ValueError(f"Strategy holds {strategy.n} vectors, dataset has {ds.n}")
    idx._append(ds.vectors)
    for vid in range(ds.n):
        idx._add_node(vid, strategy, idx.build_stats)
    return idx


def search_hnsw(idx: HnswIndex, q, params: SearchParams, strategy: Strategy):
    return idx.search(q, params, strategy)


def insert_hnsw(idx: HnswIndex, v, strategy: Strategy) -> HnswIndex:
    idx.insert(v, strategy)
    return idx


def save_hnsw(idx: HnswIndex, path: str):
    with open(path, "wb") as f:
        w = SidecarWriter(f)
        w.header(idx.dim, KIND_HNSW)
        w.u32(idx.M)
        w.u32(idx.ef_construction)
        w.u64(idx.seed)
        w.u32(idx.n)
        w.i32(-1 if idx.entry_point is None else idx.entry_point)
        w.u32(len(idx.graphs))
        w.ints(idx.levels)
        w.floats(idx.vectors)
        for layer in idx.graphs:
            w.u32(len(layer))
            for node, edges in layer.items():
                w.i32(node)
                w.u32(len(edges))
                w.ints(list(edges.keys()))
                w.doubles(list(edges.values()))


def load_hnsw(path: str) -> HnswIndex:
    with open(path, "rb") as f:
        r = SidecarReader(f, path)
        dim = r.header(KIND_HNSW)
        M = r.u32()
        ef_construction = r.u32()
        seed = r.u64()
        n = r.u32()
        entry = r.i32()
        n_layers = r.u32()
        idx = HnswIndex(dim, M, ef_construction, seed)
        levels = r.ints(n).tolist()
        idx._append(r.floats(n * dim, (n, dim)))
        idx.levels = levels
        for _ in range(n_layers):
            layer = {}
            for _ in range(r.u32()):
                node = r.i32()
                degree = r.u32()
                ids = r.ints(degree).tolist()
                dists = r.doubles(degree).tolist()
                layer[node] = dict(zip(ids, dists))
            idx.graphs.append(layer)
        r.expect_end()
    idx.entry_point = None if entry < 0 else entry
    # One level draw per node so later insertions continue the same random stream.
    idx._rng.random(n)
    return idx
