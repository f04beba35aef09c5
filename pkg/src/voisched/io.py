"""Run configuration parsing and deterministic artifact writers."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .model import SystemModel, paper_system


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


MODEL_KEYS = {"preset", "diagonal_input", "A", "B", "C", "W", "V", "Q", "R", "theta",
              "x0_mean", "x0_cov"}
BLOCK_DEFAULTS = {
    "grid": {"upper": [0.2, 0.2], "counts": [61, 61], "scale_with_theta": True},
    "solver": {"tol": 1e-9, "max_iter": 10000, "clamp": True, "cost_variant": "one-step-delay"},
    "policy": {"kind": "voi", "eta": None, "period": None, "phase": 0, "lookup": "nearest"},
    "sim": {"T": 1000, "trials": 2000, "seed": 0, "burn_in": 0, "trace": False},
    "sweep": {"thetas": [0.1, 0.2, 0.5, 1.0, 2.0, 5.0], "steps": 64,
              "families": ["quad_threshold", "norm_ae", "norm_e"],
              "periods": [1, 2, 3, 4, 5, 6, 8, 10], "tradeoff_steps": 64},
    "check": {"truncation_outer_counts": None, "truncation_tol": None},
    "output": {"dir": "out"},
}


@dataclass
class RunConfig:
    model: dict
    grid: dict
    solver: dict
    policy: dict
    sim: dict
    sweep: dict
    check: dict
    output: dict
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    @property
    def seed(self) -> int:
        return int(self.sim["seed"])

    def system(self) -> SystemModel:
        return build_model(self.model)


def config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _block(raw: dict, name: str) -> dict:
    given = raw.get(name) or {}
    if not isinstance(given, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(given).__name__}")
    allowed = MODEL_KEYS if name == "model" else set(BLOCK_DEFAULTS[name])
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(name + '.' + k for k in unknown)}")
    if name == "model":
        return dict(given)
    out = dict(BLOCK_DEFAULTS[name])
    out.update(given)
    return out


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping of blocks")
    blocks = {"model"} | set(BLOCK_DEFAULTS)
    unknown = sorted(set(raw) - blocks)
    if unknown:
        raise ConfigError(f"unknown block(s) {', '.join(unknown)}")
    if "model" not in raw:
        raise ConfigError("model: block is required")
    cfg = RunConfig(**{b: _block(raw, b) for b in blocks}, raw=raw)
    _check_values(cfg)
    return cfg


def _check_values(cfg: RunConfig) -> None:
    g = cfg.grid
    if len(g["upper"]) != len(g["counts"]):
        raise ConfigError("grid.upper and grid.counts must have the same length")
    for k in ("T", "trials"):
        if not isinstance(cfg.sim[k], int) or cfg.sim[k] < 1:
            raise ConfigError(f"sim.{k}: must be a positive integer, got {cfg.sim[k]!r}")
    if cfg.solver["cost_variant"] not in ("one-step-delay", "delay-free"):
        raise ConfigError(f"solver.cost_variant: unknown value {cfg.solver['cost_variant']!r}")
    build_model(cfg.model)


def build_model(block: dict) -> SystemModel:
    block = dict(block)
    preset = block.pop("preset", None)
    diag_in = block.pop("diagonal_input", True)
    if preset is not None:
        if preset != "paper":
            raise ConfigError(f"model.preset: unknown preset {preset!r}")
        base = paper_system(block.get("theta", 0.2), diagonal_input=diag_in)
        fields = {k: getattr(base, k) for k in MODEL_KEYS - {"preset", "diagonal_input"}}
    else:
        missing = sorted({"A", "B", "C", "W", "V", "Q", "R", "theta"} - set(block))
        if missing:
            raise ConfigError(f"model: missing field(s) {', '.join('model.' + k for k in missing)}")
        fields = {}
    fields.update(block)
    n = np.atleast_2d(np.asarray(fields["A"], dtype=float)).shape[0]
    fields.setdefault("x0_mean", np.zeros(n))
    fields.setdefault("x0_cov", np.zeros((n, n)))
    try:
        return SystemModel(**fields)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = parse_config(raw or {})
    if seed is not None:
        cfg.sim["seed"] = int(seed)
    return cfg


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path, payload: dict, stamp: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"provenance": stamp, **to_jsonable(payload)}
    # json emits repr() floats, which round-trip exactly
    path.write_text(json.dumps(body, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def write_csv(path, rows, stamp: dict) -> Path:
    """Rows start with the header; the first line is a '#' provenance comment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in stamp.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], np.array(rows[1:], dtype=float)
