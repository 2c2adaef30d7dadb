"""Experiment configuration.

Dataclass configs with a plain-text key-value file format ("key = value"
per line, "#" comments). Command-line flags override file values; the
RELDISC_OUTPUT_DIR environment variable overrides the output directory
only.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

OUTPUT_DIR_ENV = "RELDISC_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Optimization hyperparameters for the collaborative training loop."""

    tau1: float = 0.05          # word-distribution contrastive temperature
    tau2: float = 0.1           # label-index consistency temperature
    theta: float = 0.7          # pseudo-label selection threshold
    learning_rate: float = 1e-4
    max_epochs: int = 100
    patience: int = 10          # early stop after this many stagnant epochs
    warmup_epochs: int = 5      # labeled-only initialization passes
    batch_size: int = 64
    seed: int = 0
    semantic_weight: float = 1.0
    consistency_weight: float = 1.0
    supervised_weight: float = 1.0
    entropy_reg_weight: float = 1.0
    exclude_self_semantic: bool = False
    exclude_self_consistency: bool = False
    word_dist_top_k: int | None = None
    infer_top_words: int = 3

    def __post_init__(self) -> None:
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ConfigError(f"temperatures must be positive: tau1={self.tau1}, tau2={self.tau2}")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must be in [0, 1], got {self.theta}")
        if self.max_epochs < 1 or self.patience < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be non-negative (max_epochs >= 1)")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class ExperimentConfig:
    """Everything a command needs: data, lexicons, backend, and training."""

    dataset_path: str = ""
    dataset_format: str = "fewrel-json"
    split_policy: str = "fewrel"        # fewrel | tacred
    novel_ratio: float = 0.2
    entity_lexicon: str = ""
    synonym_lexicon: str = ""
    pos_sidecar: str = ""
    backend: str = "mock"               # mock | bert
    backend_model: str = "bert-base-uncased"
    mock_config: str = ""               # JSON table for the mock backend
    known_k: bool = True
    k_init: int = 0                     # 0 -> 2x the known relation count
    relation_descriptions: str = ""     # TSV relation<TAB>description
    output_dir: str = "out"
    train: TrainConfig = field(default_factory=TrainConfig)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV, self.output_dir))


def _coerce(raw: str, target_type: Any) -> Any:
    if target_type is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type == int | None:
        return None if raw.strip().lower() in ("", "none") else int(raw)
    return raw


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read "key = value" lines; later duplicates win."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            values[key.strip()] = raw.strip()
    return values


def build_experiment_config(
    file_values: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """Merge config-file values and flag overrides (flags win).

    Keys are the flat field names of ExperimentConfig and TrainConfig.
    """
    exp_fields = {f.name: f for f in fields(ExperimentConfig) if f.name != "train"}
    train_fields = {f.name: f for f in fields(TrainConfig)}
    exp_kwargs: dict[str, Any] = {}
    train_kwargs: dict[str, Any] = {}

    for key, raw in (file_values or {}).items():
        if key in exp_fields:
            exp_kwargs[key] = _coerce(raw, _hint(exp_fields[key]))
        elif key in train_fields:
            train_kwargs[key] = _coerce(raw, _hint(train_fields[key]))
        else:
            raise ConfigError(f"unknown config key {key!r}")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in exp_fields:
            exp_kwargs[key] = value
        elif key in train_fields:
            train_kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")

    return ExperimentConfig(train=TrainConfig(**train_kwargs), **exp_kwargs)


def _hint(f: dataclasses.Field) -> Any:
    # Under `from __future__ import annotations`, field types are strings.
    mapping = {"str": str, "int": int, "float": float, "bool": bool, "int | None": int | None}
    if isinstance(f.type, str):
        return mapping.get(f.type, str)
    return f.type


def config_to_text(config: ExperimentConfig) -> str:
    """Serialize a config back to the key-value format (replayable)."""
    lines = []
    for f in fields(ExperimentConfig):
        if f.name == "train":
            continue
        lines.append(f"{f.name} = {getattr(config, f.name)}")
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {getattr(config.train, f.name)}")
    return "\n".join(lines) + "\n"
