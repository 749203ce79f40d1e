#!/usr/bin/env python3
"""
Config file handling for the benchmark commands.

The config is a JSON document of nested sections. Anything not given falls back to
DEFAULTS. `--set section.key=value` overrides and the DCOBENCH_OUTPUT_DIR environment
variable are applied on top, in that order.
"""

import copy
import hashlib
import json
import os

from core import ConfigError
from dco import STRATEGIES, CLASSIFICATION_STRATEGIES, canonical_strategy

OUTPUT_DIR_ENV = "DCOBENCH_OUTPUT_DIR"

DEFAULTS = {
    "seed": 42,
    "output_dir": "runs/default",
    "metric": "euclidean",
    "strategies": ["FDScanning", "PDScanning"],
    "ks": [20, 100],
    "dataset": {
        # Either "base" (an fvecs path) or "synthetic" (generator settings) must be given.
        "base": None,
        "queries": None,
        "truth": None,
        "synthetic": None,
        "n_queries": 100,
    },
    "index": "hnsw",
    "hnsw": {
        "M": 16,
        "ef_construction": 500,
        "ef_search": [100, 200, 400, 800],
        "default_ef_search": 200,
        "build_strategy": "FDScanning",
    },
    "ivf": {
        "nlist": 256,
        "nprobe": [8, 16, 32, 64],
        "default_nprobe": 80,
    },
    "dco": {
        "delta0": 32,
        "delta_d": 32,
        "eps0": 2.1,
        "alpha": 0.05,
        "m": 3.0,
        "dade_pairs": 100000,
        "pca_sample": 100000,
    },
    "pq": {
        "c": None,
        "b": 8,
    },
    "train": {
        "n_queries": 200,
        "ks": None,
        "ef_search": 200,
        "nprobe": 16,
        "dump_samples": False,
        "sample_rate": 1.0,
        "classifier_min_vectors": 10000,
    },
    "bench": {
        "repetitions": 3,
        "warmup_queries": 10,
        "limited_fractions": [0.01, 0.1, 1.0],
        "delta0_grid": [16, 32, 64, 128],
        "delta_d_grid": [16, 32, 64, 128],
        "insert_batches": 4,
        "base_fraction": 0.6,
    },
}


def phase_seed(root_seed: int, phase: str) -> int:
    """Derive a stable per-phase seed from the root seed."""
    digest = hashlib.sha256(f"{root_seed}:{phase}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def _merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(cfg: dict, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"Override '{assignment}' must look like section.key=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"Unknown config section '{key}' in override '{path}'")
        node = node[key]
    node[keys[-1]] = _parse_value(raw)


class BenchConfig:
    """Validated view over the merged config dictionary."""

    def __init__(self, raw: dict):
        self.raw = raw
        self.seed = self._int("seed", raw["seed"])
        self.output_dir = raw["output_dir"]
        self.metric = raw["metric"]
        if self.metric not in ("euclidean", "ip", "cosine"):
            raise ConfigError(f"Field 'metric' must be euclidean, ip or cosine, got '{self.metric}'")
        if not raw["strategies"]:
            raise ConfigError("Field 'strategies' must list at least one strategy")
        self.strategies = [self._strategy(name) for name in raw["strategies"]]
        self.ks = [self._int("ks", k) for k in raw["ks"]]
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError("Field 'ks' must be a non-empty list of integers >= 1")
        self.dataset = raw["dataset"]
        if not self.dataset.get("base") and not self.dataset.get("synthetic"):
            raise ConfigError("Field 'dataset.base' or 'dataset.synthetic' is required")
        self.index = raw["index"]
        if self.index not in ("hnsw", "ivf"):
            raise ConfigError(f"Field 'index' must be hnsw or ivf, got '{self.index}'")
        self.hnsw = raw["hnsw"]
        self.ivf = raw["ivf"]
        self.dco = raw["dco"]
        self.pq = raw["pq"]
        self.train = raw["train"]
        self.bench = raw["bench"]
        grid = self.hnsw["ef_search"] if self.index == "hnsw" else self.ivf["nprobe"]
        if not grid:
            raise ConfigError(f"Field '{self.sweep_param}' grid must not be empty")
        for section, key in (("dco", "delta0"), ("dco", "delta_d")):
            if self._int(f"{section}.{key}", raw[section][key]) < 1:
                raise ConfigError(f"Field '{section}.{key}' must be >= 1")
        if not 0 < float(self.dco["alpha"]) < 1:
            raise ConfigError("Field 'dco.alpha' must be in (0, 1)")
        if float(self.dco["eps0"]) <= 0:
            raise ConfigError("Field 'dco.eps0' must be > 0")
        if float(self.dco["m"]) <= 0:
            raise ConfigError("Field 'dco.m' must be > 0")
        if self._int("bench.repetitions", self.bench["repetitions"]) < 1:
            raise ConfigError("Field 'bench.repetitions' must be >= 1")

    @staticmethod
    def _int(field, value) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"Field '{field}' must be an integer, got {value!r}")
        return value

    @staticmethod
    def _strategy(name) -> str:
        try:
            return canonical_strategy(name)
        except ValueError:
            raise ConfigError(
                f"Unknown strategy '{name}'. Valid strategies: {', '.join(STRATEGIES)}"
            )

    @property
    def sweep_param(self) -> str:
        return "ef_search" if self.index == "hnsw" else "nprobe"

    @property
    def sweep_values(self):
        return list(self.hnsw["ef_search"] if self.index == "hnsw" else self.ivf["nprobe"])

    @property
    def default_sweep_value(self) -> int:
        if self.index == "hnsw":
            return int(self.hnsw["default_ef_search"])
        return int(self.ivf["default_nprobe"])

    @property
    def classification_strategies(self):
        return [s for s in self.strategies if s in CLASSIFICATION_STRATEGIES]

    @property
    def train_ks(self):
        return list(self.train["ks"] or self.ks)

    def seed_for(self, phase: str) -> int:
        return phase_seed(self.seed, phase)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def load_config(path=None, overrides=None, env=None) -> BenchConfig:
    """Read the JSON config at path (optional), apply overrides and the env output dir."""
    raw = copy.deepcopy(DEFAULTS)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        with open(path, "r") as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        if not isinstance(user, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        raw = _merge(raw, user)
    for assignment in overrides or []:
        apply_override(raw, assignment)
    env = os.environ if env is None else env
    if env.get(OUTPUT_DIR_ENV):
        raw["output_dir"] = env[OUTPUT_DIR_ENV]
    return BenchConfig(raw)


# Phases that draw from their own derived seed; echoed in every run manifest.
SEED_PHASES = ("synthetic", "queries", "pca", "ortho", "dade", "pq", "hnsw", "ivf", "train", "spot-check")


def phase_seeds(cfg: BenchConfig) -> dict:
    seeds = {"root": cfg.seed}
    seeds.update({phase: cfg.seed_for(phase) for phase in SEED_PHASES})
    return seeds
