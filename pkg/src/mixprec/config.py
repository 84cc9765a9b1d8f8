"""Strict experiment configuration: JSON (or TOML) in, canonical JSON out.

Unknown keys are fatal everywhere; a silent typo in eta or a pool entry
would invalidate an experiment. The effective config serializes to
canonical JSON whose reload reproduces the identical run, and every CLI
command writes a manifest (config hash, seed, code version) beside its
outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import __version__
from .data import DatasetSpec
from .layers import BitPool
from .search import RetrainConfig, SearchConfig
from .tensor import set_default_dtype

SCHEMA = "experiment_v1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    name: str = "smallcnn"
    share_weights: bool = True
    weight_bits: tuple = (1, 2, 3, 4)
    activation_bits: tuple = (2, 3, 4)

    def pool(self) -> BitPool:
        return BitPool(tuple(self.weight_bits), tuple(self.activation_bits))


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    dataset: DatasetSpec
    search: SearchConfig
    retrain: RetrainConfig
    precision: str = "f64"

    def apply_precision(self) -> None:
        set_default_dtype(np.float64 if self.precision == "f64" else np.float32)


_SECTION_TYPES = {
    "model": ModelConfig,
    "dataset": DatasetSpec,
    "search": SearchConfig,
    "retrain": RetrainConfig,
}


def _build_section(name, cls, payload):
    if not isinstance(payload, dict):
        raise ConfigError(f"section '{name}' must be a table/object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    coerced = {}
    for key, value in payload.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section '{name}': {e}") from e


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a table/object")
    known = {"schema", "precision", "eta"} | set(_SECTION_TYPES)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    schema = doc.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise ConfigError(f"unsupported config schema {schema!r}, expected {SCHEMA!r}")
    precision = doc.get("precision", "f64")
    if precision not in ("f32", "f64"):
        raise ConfigError(f"precision must be 'f32' or 'f64', got {precision!r}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        if name == "dataset" and name not in doc:
            raise ConfigError("config needs a 'dataset' section")
        sections[name] = _build_section(name, cls, doc.get(name, {}))
    if "eta" in doc:
        sections["search"] = dataclasses.replace(sections["search"], eta=float(doc["eta"]))
    return ExperimentConfig(
        model=sections["model"],
        dataset=sections["dataset"],
        search=sections["search"],
        retrain=sections["retrain"],
        precision=precision,
    )


def load_config(path, eta_override: float | None = None) -> ExperimentConfig:
    text = _read_text(path)
    if str(path).endswith(".toml"):
        doc = _parse_toml(text, path)
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
    cfg = from_dict(doc)
    if eta_override is not None:
        cfg = dataclasses.replace(
            cfg, search=dataclasses.replace(cfg.search, eta=float(eta_override))
        )
    return cfg


def _read_text(path):
    try:
        with open(path) as f:
            return f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _parse_toml(text, path):
    try:
        import tomllib as toml
    except ImportError:
        try:
            import tomli as toml
        except ImportError as e:
            raise ConfigError(f"{path}: TOML support needs the 'tomli' package") from e
    try:
        return toml.loads(text)
    except toml.TOMLDecodeError as e:
        raise ConfigError(f"{path}: not valid TOML ({e})") from e


def to_dict(cfg: ExperimentConfig) -> dict:
    def section(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    return {
        "schema": SCHEMA,
        "precision": cfg.precision,
        "model": section(cfg.model),
        "dataset": section(cfg.dataset),
        "search": section(cfg.search),
        "retrain": section(cfg.retrain),
    }


def effective_json(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def save_effective(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        f.write(effective_json(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(effective_json(cfg).encode("utf-8")).hexdigest()


def write_manifest(path, command: str, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    doc = {
        "schema": "manifest_v1",
        "command": command,
        "config_sha256": config_hash(cfg),
        "seed": cfg.search.seed,
        "version": __version__,
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
