"""Run configuration: one TOML file, flag overrides (flags win), and a
stable fingerprint embedded in every artifact produced from it.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

SEED_ENV_VAR = "IDP_SEED"


@dataclass
class RunConfig:
    # paths
    source: str = "source.idpf"
    target: str = "target.idpf"
    bank: str = "bank.idpb"
    pool: str = "pool.idpu"
    out: str = "out"
    # model
    ridge_lambda: float = 0.1
    pool_size: int = 64
    prototypes_per_class: int = 20
    target_prototypes_per_class: int = 20
    adapter_depth: int = 1
    adapter_eps: float = 1e-5
    # source stage
    source_learning_rate: float = 0.05
    source_steps: int = 350
    source_batch_size: int = 64
    # finetune stage
    learning_rate: float = 0.01
    steps: int = 50
    schedule_alpha: float = 10.0
    # loss weights
    weight_target: float = 1.0
    weight_proxy: float = 1.0
    weight_align: float = 1.0
    align_full_params: bool = False
    # episodes
    ways: int = 5
    shots: int | tuple[int, int] = 5
    queries: int = 16
    episodes: int = 600
    # synthetic domains
    synth_classes: int = 8
    synth_samples_per_class: int = 40
    synth_width: int = 2
    synth_height: int = 2
    synth_channels: int = 12
    shift_magnitude: float = 1.0
    content_noise: float = 0.5
    # run
    seed: int = 0
    workers: int = 1
    force: bool = False

    # Execution details that do not change the math stay out of the
    # fingerprint so reruns with different worker counts match.
    _NON_SEMANTIC = ("out", "workers", "force")

    def validate(self) -> None:
        numeric_bounds = {
            "ridge_lambda": (0.0, None),
            "pool_size": (1, None),
            "prototypes_per_class": (1, None),
            "target_prototypes_per_class": (1, None),
            "adapter_depth": (1, None),
            "learning_rate": (0.0, None),
            "steps": (0, None),
            "episodes": (1, None),
            "queries": (1, None),
            "ways": (2, None),
        }
        for name, (lo, hi) in numeric_bounds.items():
            v = getattr(self, name)
            if lo is not None and v < lo:
                raise ConfigError(f"{name} = {v!r} below minimum {lo}")
            if hi is not None and v > hi:
                raise ConfigError(f"{name} = {v!r} above maximum {hi}")

    def fingerprint(self) -> str:
        doc = {}
        for f in fields(self):
            if f.name in self._NON_SEMANTIC:
                continue
            v = getattr(self, f.name)
            doc[f.name] = list(v) if isinstance(v, tuple) else v
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def out_path(self, name: str) -> Path:
        return Path(self.out) / name


_SECTION_KEYS = {
    ("paths", "source"): "source",
    ("paths", "target"): "target",
    ("paths", "bank"): "bank",
    ("paths", "pool"): "pool",
    ("paths", "out"): "out",
    ("model", "ridge_lambda"): "ridge_lambda",
    ("model", "pool_size"): "pool_size",
    ("model", "prototypes_per_class"): "prototypes_per_class",
    ("model", "target_prototypes_per_class"): "target_prototypes_per_class",
    ("model", "adapter_depth"): "adapter_depth",
    ("model", "adapter_eps"): "adapter_eps",
    ("source_stage", "learning_rate"): "source_learning_rate",
    ("source_stage", "steps"): "source_steps",
    ("source_stage", "batch_size"): "source_batch_size",
    ("finetune", "learning_rate"): "learning_rate",
    ("finetune", "steps"): "steps",
    ("finetune", "schedule_alpha"): "schedule_alpha",
    ("weights", "target"): "weight_target",
    ("weights", "proxy"): "weight_proxy",
    ("weights", "align"): "weight_align",
    ("weights", "align_full_params"): "align_full_params",
    ("episodes", "ways"): "ways",
    ("episodes", "shots"): "shots",
    ("episodes", "queries"): "queries",
    ("episodes", "count"): "episodes",
    ("synth", "classes"): "synth_classes",
    ("synth", "samples_per_class"): "synth_samples_per_class",
    ("synth", "width"): "synth_width",
    ("synth", "height"): "synth_height",
    ("synth", "channels"): "synth_channels",
    ("synth", "shift_magnitude"): "shift_magnitude",
    ("synth", "content_noise"): "content_noise",
    ("run", "seed"): "seed",
    ("run", "workers"): "workers",
}


def load_config(path: str | None) -> RunConfig:
    """Build a RunConfig from a TOML file (or defaults when path is None)."""
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section, table in doc.items():
        if not isinstance(table, dict):
            raise ConfigError(f"top-level key {section!r} is not a section")
        for key, value in table.items():
            attr = _SECTION_KEYS.get((section, key))
            if attr is None:
                raise ConfigError(f"unknown config key [{section}] {key}")
            if attr == "shots" and isinstance(value, list):
                value = (int(value[0]), int(value[1]))
            setattr(cfg, attr, value)
    return cfg


def apply_env_seed(cfg: RunConfig) -> None:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is not None:
        try:
            cfg.seed = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from exc


def file_sha256(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return h.hexdigest()
