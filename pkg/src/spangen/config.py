"""Run configuration: JSON file + flag overrides + documented defaults.

Precedence is flags > file > defaults; every resolved leaf records where
its value came from, and the resolved config is echoed into the run
directory so any artifact can be regenerated from its sidecar.
Unknown keys are rejected by name.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .corpus import SynthConfig
from .nets import DecodeConfig, ModelConfig, config_hash
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class CorpusOptions:
    cases: int = 200
    vocab_size: int = 200
    focused_fraction: float = 0.3
    ratios: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])

    def validate(self) -> None:
        SynthConfig(cases=self.cases, vocab_size=self.vocab_size,
                    focused_fraction=self.focused_fraction).validate()
        if len(self.ratios) != 3:
            raise ConfigError(f"corpus.ratios must have 3 entries, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9 or any(r < 0 for r in self.ratios):
            raise ConfigError(f"corpus.ratios must be non-negative and sum to 1, got {self.ratios}")

    def synth_config(self, seed: int) -> SynthConfig:
        return SynthConfig(
            cases=self.cases, vocab_size=self.vocab_size, seed=seed,
            focused_fraction=self.focused_fraction,
        )


@dataclass
class MetricsOptions:
    repetitions: int = 5
    mode: str = "span"
    figures: bool = True

    def validate(self) -> None:
        if self.repetitions < 1:
            raise ConfigError(f"metrics.repetitions must be >= 1, got {self.repetitions}")
        if self.mode not in ("span", "sentence"):
            raise ConfigError(f"metrics.mode must be 'span' or 'sentence', got {self.mode!r}")


@dataclass
class PathsConfig:
    corpus: str | None = None
    splits: str | None = None
    checkpoint: str | None = None
    log: str | None = None
    split_name: str = "general_test"

    def validate(self) -> None:
        pass


@dataclass
class RunConfig:
    seed: int = 13
    corpus: CorpusOptions = field(default_factory=CorpusOptions)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    metrics: MetricsOptions = field(default_factory=MetricsOptions)
    paths: PathsConfig = field(default_factory=PathsConfig)
    provenance: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        for section in ("corpus", "model", "train", "decode", "metrics", "paths"):
            try:
                getattr(self, section).validate()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"{section}: {exc}") from exc

    def as_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for section in ("corpus", "model", "train", "decode", "metrics", "paths"):
            out[section] = dataclasses.asdict(getattr(self, section))
        return out

    def fingerprint(self) -> str:
        return config_hash(self.as_dict())


_SECTIONS = {
    "corpus": CorpusOptions,
    "model": ModelConfig,
    "train": TrainConfig,
    "decode": DecodeConfig,
    "metrics": MetricsOptions,
    "paths": PathsConfig,
}


def _coerce(value: Any, target_type: Any, key: str) -> Any:
    origin = getattr(target_type, "__origin__", None)
    if target_type in (int,):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if target_type in (float,):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if target_type in (bool,):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if target_type in (str,):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if origin is list or target_type is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    # optional[int|str|...] unions: accept None or try members
    if origin is not None or "|" in str(target_type):
        if value is None:
            return None
        for member in (int, float, str):
            try:
                return _coerce(value, member, key)
            except ConfigError:
                continue
        raise ConfigError(f"{key}: cannot interpret {value!r}")
    return value


def _apply_section(obj: Any, section: str, data: dict, provenance: dict[str, str], source: str) -> None:
    resolved = typing.get_type_hints(type(obj))
    names = {f.name for f in fields(type(obj))}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        setattr(obj, key, _coerce(value, resolved[key], f"{section}.{key}"))
        provenance[f"{section}.{key}"] = source


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional JSON file, and dotted
    flag overrides such as {"train.lambda_aug": 5}."""
    cfg = RunConfig()
    provenance: dict[str, str] = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            provenance[f"{section}.{f.name}"] = "default"
    provenance["seed"] = "default"

    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, value in data.items():
            if key == "seed":
                cfg.seed = _coerce(value, int, "seed")
                provenance["seed"] = "file"
            elif key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key} must be an object")
                _apply_section(getattr(cfg, key), key, value, provenance, "file")
            else:
                raise ConfigError(f"unknown key {key}")

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if dotted == "seed":
            cfg.seed = _coerce(value, int, "seed")
            provenance["seed"] = "flag"
            continue
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or not key:
            raise ConfigError(f"unknown override {dotted}")
        _apply_section(getattr(cfg, section), section, {key: value}, provenance, "flag")

    cfg.provenance = provenance
    cfg.validate()
    return cfg


def write_config_echo(path: str | Path, cfg: RunConfig) -> None:
    payload = {"config": cfg.as_dict(), "provenance": cfg.provenance, "seed": cfg.seed}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
