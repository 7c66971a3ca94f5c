"""Run configuration: defaults, YAML file, environment, then command-line overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .gateway import DEDUP_MODEL, MATCH_MODEL
from .model import MatchConfig

EMBEDDING_BACKENDS = ("sentence-transformers", "http", "hashing")
STRATEGIES = ("direct", "cot")
SOURCES = ("t", "s", "l")


class ConfigInvalid(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass
class CompletionSettings:
    url: str | None = None
    model: str = "gpt-4o"
    api_key: str | None = None
    temperature: float = 0.0
    max_tokens: int = 4096


@dataclass
class EmbeddingSettings:
    backend: str = "sentence-transformers"
    url: str | None = None
    api_key: str | None = None
    dedup_model: str = DEDUP_MODEL
    match_model: str = MATCH_MODEL


@dataclass
class AnnotationSettings:
    url: str | None = None


@dataclass
class MatchSettings:
    numeric_tolerance: float = 0.01
    value_sim_threshold: float = 0.8
    column_sim_threshold: float = 0.7
    dedup_threshold: float = 0.97

    def to_match_config(self) -> MatchConfig:
        return MatchConfig(self.numeric_tolerance, self.value_sim_threshold, self.column_sim_threshold,
                           self.dedup_threshold)


@dataclass
class PipelineSettings:
    strategy: str = "direct"
    sources: list[str] = field(default_factory=lambda: list(SOURCES))
    precedence: list[str] = field(default_factory=lambda: list(SOURCES))
    central_table: str | None = None
    workers: int = 1
    max_retries: int = 3


@dataclass
class Config:
    completion: CompletionSettings = field(default_factory=CompletionSettings)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    annotation: AnnotationSettings = field(default_factory=AnnotationSettings)
    match: MatchSettings = field(default_factory=MatchSettings)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)


ENV_VARS = {
    "TEXT2DB_COMPLETION_URL": "completion.url",
    "TEXT2DB_COMPLETION_MODEL": "completion.model",
    "TEXT2DB_API_KEY": "completion.api_key",
    "TEXT2DB_EMBEDDING_BACKEND": "embedding.backend",
    "TEXT2DB_EMBEDDING_URL": "embedding.url",
    "TEXT2DB_EMBEDDING_API_KEY": "embedding.api_key",
    "TEXT2DB_ANNOTATION_URL": "annotation.url",
}


def _field_types(obj: Any) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(obj)}


def _coerce(path: str, default_type: Any, value: Any) -> Any:
    kind = default_type if isinstance(default_type, str) else ""
    if value is None:
        return None
    if "list" in kind:
        if isinstance(value, str):
            return [v.strip().lower() for v in value.split(",") if v.strip()]
        if isinstance(value, (list, tuple)):
            return [str(v).strip().lower() for v in value]
        raise ConfigInvalid(path, f"expected a list, got {value!r}")
    if kind.startswith("float"):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigInvalid(path, f"expected a number, got {value!r}") from None
    if kind.startswith("int"):
        if isinstance(value, bool):
            raise ConfigInvalid(path, f"expected an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigInvalid(path, f"expected an integer, got {value!r}") from None
    if isinstance(value, (dict, list)):
        raise ConfigInvalid(path, f"expected a scalar, got {value!r}")
    return str(value)


def _apply(config: Config, dotted: str, value: Any) -> None:
    section_name, _, key = dotted.partition(".")
    if not key or not hasattr(config, section_name):
        raise ConfigInvalid(dotted, "unknown setting")
    section = getattr(config, section_name)
    fields = _field_types(section)
    if key not in fields:
        raise ConfigInvalid(dotted, "unknown setting")
    setattr(section, key, _coerce(dotted, fields[key].type, value))


def validate(config: Config) -> Config:
    m = config.match
    for name in ("value_sim_threshold", "column_sim_threshold", "dedup_threshold"):
        v = getattr(m, name)
        if not 0 < v <= 1:
            raise ConfigInvalid(f"match.{name}", f"must be in (0, 1], got {v}")
    if not m.numeric_tolerance > 0:
        raise ConfigInvalid("match.numeric_tolerance", f"must be > 0, got {m.numeric_tolerance}")
    p = config.pipeline
    if p.strategy not in STRATEGIES:
        raise ConfigInvalid("pipeline.strategy", f"must be one of {', '.join(STRATEGIES)}")
    for name in ("sources", "precedence"):
        values = getattr(p, name)
        if not values or any(v not in SOURCES for v in values) or len(set(values)) != len(values):
            raise ConfigInvalid(f"pipeline.{name}", f"must be distinct letters from t,s,l, got {values}")
    if not set(p.sources) <= set(p.precedence):
        raise ConfigInvalid("pipeline.precedence", "must rank every selected source")
    if p.workers < 1:
        raise ConfigInvalid("pipeline.workers", "must be >= 1")
    if p.max_retries < 0:
        raise ConfigInvalid("pipeline.max_retries", "must be >= 0")
    if not 0 <= config.completion.temperature <= 1:
        raise ConfigInvalid("completion.temperature", "must be in [0, 1]")
    if config.completion.max_tokens < 1:
        raise ConfigInvalid("completion.max_tokens", "must be >= 1")
    if config.embedding.backend not in EMBEDDING_BACKENDS:
        raise ConfigInvalid("embedding.backend", f"must be one of {', '.join(EMBEDDING_BACKENDS)}")
    return config


def load_config(path: str | Path | None = None, environment: Mapping[str, str] | None = None,
                overrides: Mapping[str, Any] | None = None) -> Config:
    """Merge defaults < file < environment < ``overrides`` (dotted keys like ``match.dedup_threshold``)."""
    config = Config()
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigInvalid(str(path), f"cannot read: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigInvalid(str(path), f"invalid YAML: {exc}") from exc
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigInvalid(str(path), "top level must be a mapping")
        for section, values in data.items():
            if not isinstance(values, dict):
                raise ConfigInvalid(str(section), "must be a mapping")
            for key, value in values.items():
                _apply(config, f"{section}.{key}", value)
    env = os.environ if environment is None else environment
    for var, dotted in ENV_VARS.items():
        if env.get(var):
            _apply(config, dotted, env[var])
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _apply(config, dotted, value)
    return validate(config)
