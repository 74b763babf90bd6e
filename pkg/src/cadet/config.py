"""Run configuration: YAML schema, validation, and hashing.

Every tunable constant of the pipeline is a named key with its default;
unknown keys are rejected with the list of valid ones.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    n_train: int = 240
    n_reference: int = 192
    n_test_normal: int = 40
    n_test_anomaly_per_kind: int = 8
    jitter_train: bool = True


@dataclass
class ScheduleSection:
    T_train: int = 400
    beta_start: float = 1e-4
    beta_end: float = 0.025


@dataclass
class PretrainSection:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-4


@dataclass
class MCLSection:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    eval_every: int = 50
    patience: int = 8


@dataclass
class GenerateSection:
    n_candidates: int = 320
    n_accept: int = 200  # cap on accepted pairs carried forward
    T: int = 50  # denoising steps at sampling time
    band_percentile: float = 95.0
    band_widen: float = 3.0
    encoder_seed: int = 0


@dataclass
class DetectorSection:
    steps: int = 600
    batch_size: int = 16
    lr: float = 1e-3
    omega: float = 5.0  # focal term weight in the composite loss
    augment: bool = True
    use_diff: bool = True
    use_csda: bool = True


@dataclass
class EvaluateSection:
    fpr_cap: float = 0.05


@dataclass
class RunConfig:
    run_name: str = "default"
    rule: str = "pinboard"
    seed: int = 0
    deterministic: bool = False
    corpus: CorpusSection = field(default_factory=CorpusSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    mcl: MCLSection = field(default_factory=MCLSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)


_SECTIONS = {
    "corpus": CorpusSection,
    "schedule": ScheduleSection,
    "pretrain": PretrainSection,
    "mcl": MCLSection,
    "generate": GenerateSection,
    "detector": DetectorSection,
    "evaluate": EvaluateSection,
}


def _fill(cls, data: dict, path: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    bad = set(data) - valid
    if bad:
        raise ConfigError(
            f"unknown key(s) {sorted(bad)} under '{path}'; valid keys: {sorted(valid)}"
        )
    return cls(**data)


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    top_valid = {f.name for f in dataclasses.fields(RunConfig)}
    bad = set(data) - top_valid
    if bad:
        raise ConfigError(
            f"unknown key(s) {sorted(bad)} at top level; valid keys: {sorted(top_valid)}"
        )
    kwargs = {}
    for key, val in data.items():
        if key in _SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"'{key}' must be a mapping")
            kwargs[key] = _fill(_SECTIONS[key], val, key)
        else:
            kwargs[key] = val
    return RunConfig(**kwargs)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return from_dict(data)


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
