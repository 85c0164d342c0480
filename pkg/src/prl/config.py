"""Run configuration: defaults < YAML file of flat dotted keys < command-line flags."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from prl.data import RewardConfig
from prl.evaluation import DEFAULT_KS, InferenceRewardConfig
from prl.model import TrainConfig

DATASET_MODES = ("canonical", "retailrocket", "challenge15", "synthetic")

# keys under these prefixes map onto the nested dataclasses
_SECTIONS = {"reward": RewardConfig, "train": TrainConfig, "inference": InferenceRewardConfig}
# the run-level seed drives these; they cannot be set separately
_SEED_OWNED = {"train.seed", "inference.seed"}


@dataclass(frozen=True)
class RunConfig:
    work_dir: str = "work"
    input: str | None = None
    buys: str | None = None
    checkpoint: str | None = None
    dataset_mode: str = "canonical"
    min_item_count: int | None = None
    max_sessions: int | None = None
    runs: int = 1
    ks: tuple[int, ...] = DEFAULT_KS
    seed: int = 0
    reward: RewardConfig = field(default_factory=RewardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceRewardConfig = field(default_factory=InferenceRewardConfig)

    def __post_init__(self):
        if self.dataset_mode not in DATASET_MODES:
            raise ValueError(f"unknown dataset mode {self.dataset_mode!r}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


def load_file(path: str | Path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping of dotted keys")
    return flatten(data)


def flatten(data: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def build(file_values: dict[str, Any] | None = None,
          overrides: dict[str, Any] | None = None) -> RunConfig:
    """Merge flat dotted keys (file first, then overrides) over the defaults."""
    merged = {**(file_values or {}), **{k: v for k, v in (overrides or {}).items() if v is not None}}
    top_names = {f.name for f in fields(RunConfig)} - set(_SECTIONS)
    top, nested = {}, {name: {} for name in _SECTIONS}
    for key, value in merged.items():
        if key in _SEED_OWNED:
            raise ValueError(f"{key} is derived from the run-level 'seed' key")
        section, _, leaf = key.partition(".")
        if leaf and section in _SECTIONS:
            valid = {f.name for f in fields(_SECTIONS[section])}
            if leaf not in valid:
                raise ValueError(f"unknown config key {key!r}")
            nested[section][leaf] = value
        elif not leaf and key in top_names:
            top[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    if "ks" in top:
        top["ks"] = parse_ints(top["ks"])
    seed = int(top.get("seed", 0))
    nested["train"]["seed"] = seed
    nested["inference"]["seed"] = seed
    sections = {name: _SECTIONS[name](**vals) for name, vals in nested.items()}
    return RunConfig(**top, **sections)


def parse_ints(value) -> tuple[int, ...]:
    if isinstance(value, str):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return tuple(int(v) for v in value)


def to_dict(config: RunConfig) -> dict[str, Any]:
    d = asdict(config)
    d["ks"] = list(config.ks)
    return d


def config_hash(config: RunConfig, sections: tuple[str, ...] | None = None) -> str:
    """Stable digest of the settings that shape results (paths excluded)."""
    d = to_dict(config)
    for key in ("work_dir", "input", "buys", "checkpoint"):
        d.pop(key)
    if sections is not None:
        d = {k: v for k, v in d.items() if k in sections}
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
