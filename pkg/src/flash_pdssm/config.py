"""JSON run configs: defaults per command, strict key checking, hashing and
append-only result records."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import subprocess
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from importlib import resources

import numpy as np

SCHEMA_VERSION = 1
HASH_EXCLUDE = ("workers", "out")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "train": {
        "version": SCHEMA_VERSION,
        "task": "parity",
        "seed": 0,
        "workers": 1,
        "precision": "f32",
        "out": "runs/train",
        "network": {"depth": 2, "d_model": 64, "heads": 4, "k": 4, "mode": "complex"},
        "train": {
            "steps": 20000,
            "batch_size": 64,
            "lr": 0.002,
            "warmup_frac": 0.05,
            "temp_start": 1.0,
            "temp_end": 0.1,
            "anneal_frac": 0.8,
            "train_len": [1, 40],
            "eval_len": [40, 256],
            "eval_every": 1000,
            "eval_samples": 512,
            "grad_clip": 1.0,
        },
    },
    "eval": {
        "version": SCHEMA_VERSION,
        "checkpoint": "",
        "task": "parity",
        "seed": 0,
        "workers": 1,
        "precision": "f32",
        "out": "runs/eval",
        "samples": 4096,
        "buckets": [[40, 64], [65, 128], [129, 256]],
    },
    "compile-fsa": {
        "version": SCHEMA_VERSION,
        "automaton": "parity",
        "seed": 0,
        "workers": 1,
        "precision": "f64",
        "out": "runs/compile",
        "max_exhaustive_len": 8,
        "random_trials": 10000,
        "max_random_len": 512,
    },
    "bench-scan": {
        "version": SCHEMA_VERSION,
        "seed": 0,
        "workers": 1,
        "precision": "f32",
        "out": "runs/bench",
        "repeats": 3,
        "grid": {"L": [256, 1024], "N": [16, 64], "B": [4], "tau": [1, 64, 128], "workers": [1, 4]},
        "memory": {"L": 2048, "N": [64, 128], "K": 4},
        "speedup": {"L": 8192, "N": 64, "B": 8, "tau": 128, "workers": 4},
    },
    "check-grad": {
        "version": SCHEMA_VERSION,
        "seed": 0,
        "workers": 1,
        "precision": "f64",
        "out": "runs/check_grad",
        "depth": 2,
        "d_model": 8,
        "heads": 2,
        "k": 2,
        "length": 6,
        "batch": 2,
        "mode": "complex",
        "temps": [1.0, 0.3, 0.1],
        "fd_step": 1e-6,
    },
}

NULLABLE = {("train", "grad_clip")}


def _merge(base: dict, override: dict, path: str = "", nullable=NULLABLE) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown key {where!r}")
        ref = base[key]
        if isinstance(ref, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(ref, val, where + ".", nullable)
            continue
        if val is None and tuple(where.split(".")[-2:]) in nullable:
            out[key] = None
            continue
        if isinstance(ref, bool) or isinstance(val, bool):
            ok = isinstance(val, bool) and isinstance(ref, bool)
        elif isinstance(ref, float):
            ok = isinstance(val, (int, float))
            val = float(val) if ok else val
        elif isinstance(ref, int):
            ok = isinstance(val, int)
        elif isinstance(ref, str):
            ok = isinstance(val, str)
        elif isinstance(ref, list):
            ok = isinstance(val, list)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{where!r} has type {type(val).__name__}, expected {type(ref).__name__}")
        out[key] = val
    return out


PRESET_DIR = "presets"


def preset_names() -> list[str]:
    base = resources.files("flash_pdssm.assets").joinpath(PRESET_DIR)
    return sorted(p.name[:-5] for p in base.iterdir() if p.name.endswith(".json"))


def read_config_file(source: str) -> dict:
    """A JSON file path, or the name of a bundled preset such as ``parity-quick``."""
    if os.path.exists(source):
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    else:
        res = resources.files("flash_pdssm.assets").joinpath(PRESET_DIR, f"{source}.json")
        if not res.is_file():
            raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(preset_names())})")
        text = res.read_text("utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {source}: line {e.lineno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def resolve(command: str, file_cfg: dict | None = None, flags: dict | None = None) -> dict:
    """Defaults, then the file, then explicit flags (None flags are ignored)."""
    cfg = _merge(DEFAULTS[command], file_cfg or {})
    if cfg["version"] != SCHEMA_VERSION:
        raise ConfigError(f"config version {cfg['version']} unsupported (expected {SCHEMA_VERSION})")
    set_flags = {k: v for k, v in (flags or {}).items() if v is not None}
    cfg = _merge(cfg, _nest(set_flags))
    if cfg.get("precision") not in ("f32", "f64"):
        raise ConfigError("'precision' must be 'f32' or 'f64'")
    if cfg["workers"] < 1:
        raise ConfigError("'workers' must be >= 1")
    return cfg


def _nest(flat: dict) -> dict:
    out: dict = {}
    for key, val in flat.items():
        cur = out
        parts = key.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = val
    return out


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical config without fields that cannot change results."""
    kept = {k: v for k, v in cfg.items() if k not in HASH_EXCLUDE}
    return hashlib.sha256(canonical_json(kept).encode()).hexdigest()


# ------------------------------------------------------------------- records


@dataclass(frozen=True)
class ResultRecord:
    run_id: str
    config_hash: str
    git_rev: str
    metric: str
    value: float
    units: str
    timestamp: str


RESULT_COLUMNS = tuple(f.name for f in fields(ResultRecord))


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(__file__))
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def now_utc() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def append_records(path: str, records: list[ResultRecord]) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULT_COLUMNS)
        for r in records:
            row = asdict(r)
            row["value"] = repr(float(r.value))
            w.writerow([row[c] for c in RESULT_COLUMNS])


def read_records(path: str) -> list[ResultRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [ResultRecord(**{**r, "value": float(r["value"])}) for r in rows]


def fmt_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path: str, columns, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt_value(r[c]) for c in columns])


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
