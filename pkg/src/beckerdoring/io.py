"""Config parsing and deterministic report writing."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError

KINDS = ("equilibrium", "simulate", "spectrum", "dissipativity", "interp-check",
         "linear-decay", "nonlinear-decay", "duhamel")

# every key a config may set, with its default; None means "unset"
DEFAULTS = {
    "kind": None,
    "model": "penrose",
    "alpha": 0.5, "mu": 0.5, "q": 1.0, "z_s": 1.0,
    "a": None, "b": None,
    "N": 200,
    "z": None, "z_fraction": None, "rho": None, "rho_fraction": None,
    "method": "explicit_adaptive", "rtol": 1e-8, "atol": 1e-14,
    "dt_init": 1e-3, "dt_max": 1.0, "t_end": 10.0, "n_checkpoints": 101,
    "interpolation": "dense",
    "ks": [1.0, 2.0, 3.0],
    "k": 3.5, "m": 1.0,
    "p": 6.5, "amplitude": 1e-2, "signs": "positive", "scale": "density", "compensation": "h1",
    "dt": 0.25, "per_decade": 20,
    "samples": 2000, "g_max": 2.0, "g_grid": [-0.5, -0.25, 0.0, 0.25, 0.5],
    "eta": None, "r": [1.0, 2.0, 3.0],
    "seed": 0, "threads": 1, "out": None,
}

NUMERIC = {"alpha", "mu", "q", "z_s", "z", "z_fraction", "rho", "rho_fraction", "rtol", "atol",
           "dt_init", "dt_max", "t_end", "k", "m", "p", "amplitude", "dt", "g_max", "eta"}
INTEGER = {"N", "n_checkpoints", "per_decade", "samples", "seed", "threads"}


def parse_value(text):
    """JSON literal when possible, bare string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text):
    """JSON object, or ``key = value`` lines (``#`` comments, blank lines ignored)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return data
    data = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        data[key.strip()] = parse_value(value.strip())
    return data


def parse_override(item):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, value = item.split("=", 1)
    return key.strip(), parse_value(value.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def digest(self):
        # the output location does not change results
        return config_hash({k: v for k, v in self.values.items() if k != "out"})


def resolve_config(raw, overrides=(), seed=None, threads=None):
    """Validate keys and types and fill every default explicitly."""
    data = dict(raw)
    for key, value in overrides:
        data[key] = value
    if seed is not None:
        data["seed"] = seed
    if threads is not None:
        data["threads"] = threads
    unknown = sorted(set(data) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {**DEFAULTS, **data}
    if cfg["kind"] not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}; got {cfg['kind']!r}")
    for key in NUMERIC:
        if cfg[key] is not None:
            if isinstance(cfg[key], bool) or not isinstance(cfg[key], (int, float)):
                raise ConfigError(f"{key} must be a number")
            cfg[key] = float(cfg[key])
    for key in INTEGER:
        if isinstance(cfg[key], bool) or not isinstance(cfg[key], int):
            raise ConfigError(f"{key} must be an integer")
    if cfg["seed"] < 0 or cfg["seed"] >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be at least 1")
    chosen = [k for k in ("z", "z_fraction", "rho", "rho_fraction") if cfg[k] is not None]
    if len(chosen) > 1:
        raise ConfigError(f"give only one of z, z_fraction, rho, rho_fraction (got {', '.join(chosen)})")
    if not chosen:
        cfg["z_fraction"] = 0.5
    if cfg["model"] not in ("penrose", "custom"):
        raise ConfigError("model must be 'penrose' or 'custom'")
    if cfg["model"] == "custom" and (cfg["a"] is None or cfg["b"] is None):
        raise ConfigError("custom model needs a and b")
    if cfg["out"] is not None and not isinstance(cfg["out"], str):
        raise ConfigError("out must be a path string")
    for key in ("a", "b"):
        v = cfg[key]
        ok = v is None or (isinstance(v, (int, float)) and not isinstance(v, bool)) or (
            isinstance(v, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v))
        if not ok:
            raise ConfigError(f"{key} must be a number or a list of numbers")
        if isinstance(v, list) and len(v) != cfg["N"]:
            raise ConfigError(f"{key} has {len(v)} entries but N = {cfg['N']}")
    for key in ("signs", "scale", "compensation", "method", "interpolation"):
        if not isinstance(cfg[key], str):
            raise ConfigError(f"{key} must be a string")
    for key in ("ks", "r", "g_grid"):
        v = cfg[key]
        if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            raise ConfigError(f"{key} must be a list of numbers")
        cfg[key] = [float(x) for x in v]
    return ExperimentConfig(cfg)


def load_config(path, overrides=(), seed=None, threads=None):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return resolve_config(parse_config_text(text), overrides, seed, threads)


# --- serialisation ----------------------------------------------------------

def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def dumps(obj):
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def config_hash(values):
    blob = json.dumps(to_jsonable(values), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def atomic_write(path, text):
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, dumps(obj))


def write_csv(path, header, rows):
    atomic_write(path, csv_text(header, rows))
