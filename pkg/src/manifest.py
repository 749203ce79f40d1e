#!/usr/bin/env python3
"""
Run manifests: one JSON document per command run, referenced by every output it wrote.
"""

import hashlib
import json
import os
import platform
import subprocess
from datetime import datetime, timezone

import numpy as np
import psutil

TOOL_NAME = "dcobench"
TOOL_VERSION = "0.1.0"


def git_describe(cwd=None) -> str:
    """`git describe --always --dirty` of the checkout, or "unknown" outside a repository."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=cwd or os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def get_system_info() -> dict:
    """Host facts that make timing columns comparable across runs"""
    memory = psutil.virtual_memory()
    try:
        load_avg = [round(v, 2) for v in os.getloadavg()]
    except (AttributeError, OSError):
        load_avg = None
    freq = psutil.cpu_freq()
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count_logical": psutil.cpu_count(logical=True),
        "cpu_count_physical": psutil.cpu_count(logical=False),
        "cpu_freq_mhz": round(freq.current, 1) if freq else None,
        "cpu_usage_percent": psutil.cpu_percent(interval=0.1),
        "memory_total_gb": round(memory.total / (1024**3), 2),
        "memory_used_gb": round(memory.used / (1024**3), 2),
        "memory_percent": memory.percent,
        "load_average": load_avg,
    }


def derive_run_id(command: str, config: dict, seeds: dict = None) -> str:
    """Run id fixed by the command, the merged config and the seeds, so reruns reuse it."""
    payload = json.dumps(
        {"command": command, "config": config, "seeds": dict(seeds or {})}, sort_keys=True, default=str
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunManifest:
    def __init__(self, command: str, config: dict, seeds: dict = None):
        self.run_id = derive_run_id(command, config, seeds)
        self.command = command
        self.config = config
        self.seeds = dict(seeds or {})
        self.fingerprints = {}
        self.outputs = []
        self.started = _now()
        self.finished = None
        self.git = git_describe()
        self.system = get_system_info()

    def add_fingerprint(self, name: str, fingerprint: str):
        self.fingerprints[name] = fingerprint

    def add_output(self, path: str):
        self.outputs.append(os.path.basename(path))

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "tool": TOOL_NAME,
            "version": TOOL_VERSION,
            "git_describe": self.git,
            "command": self.command,
            "started": self.started,
            "finished": self.finished,
            "seeds": self.seeds,
            "dataset_fingerprints": self.fingerprints,
            "outputs": self.outputs,
            "system": self.system,
            "config": self.config,
        }

    def write(self, output_dir: str) -> str:
        self.finished = _now()
        path = os.path.join(output_dir, f"manifest_{self.command}_{self.run_id}.json")
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        print(f"✅ Manifest written: {path}")
        return path
