"""Pipeline configuration: schema, file loading, flag overrides and the per-run echo."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .boxops import FusionParams
from .dataset import DatasetConfig
from .enhance import FusionConfig, MsrcrConfig, SaliencyConfig
from .errors import ConfigError
from .transfer import DarkenConfig
from .zerodce import ZeroDceConfig

SCHEMA_VERSION = 1
CONFIG_ENV = "NIGHTFORGE_CONFIG"
CONFIG_ECHO_NAME = "config.json"

_DEFAULT_WORKERS = int(os.environ.get("NIGHTFORGE_WORKERS", 1))


class PipelineConfig(BaseModel):
    """Every tunable of every command, with documented defaults. Unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: int = SCHEMA_VERSION
    seed: int = Field(default=0, ge=0)
    workers: int = Field(default=_DEFAULT_WORKERS, ge=1)
    strict: bool = False
    msrcr: MsrcrConfig = Field(default_factory=MsrcrConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    saliency: SaliencyConfig = Field(default_factory=SaliencyConfig)
    zerodce: ZeroDceConfig = Field(default_factory=ZeroDceConfig)
    darken: DarkenConfig = Field(default_factory=DarkenConfig)
    boxes: FusionParams = Field(default_factory=FusionParams)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)

    @field_validator("schema_version")
    @classmethod
    def _known_schema(cls, value: int) -> int:
        if value != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {value}; this build reads {SCHEMA_VERSION}")
        return value


def _validate(data: Mapping[str, Any], source: str) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(dict(data))
    except ValidationError as exc:
        raise ConfigError(f"Invalid configuration in {source}:\n{exc}") from exc


def load_config(
    path: Optional[Union[str, Path]] = None, *, env: Optional[Mapping[str, str]] = None
) -> PipelineConfig:
    """Load a JSON config from ``path``, else from ``$NIGHTFORGE_CONFIG``, else the defaults."""

    env = os.environ if env is None else env
    location = path or env.get(CONFIG_ENV)
    if not location:
        return PipelineConfig()

    source = Path(location)
    if not source.is_file():
        raise ConfigError(f"Config file not found: {source}")
    try:
        data = json.loads(source.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {source} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {source} must hold a JSON object.")
    return _validate(data, str(source))


def apply_overrides(
    cfg: PipelineConfig,
    *,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    strict: Optional[bool] = None,
    alpha: Optional[float] = None,
) -> PipelineConfig:
    """Layer command-line flags over a loaded config; ``None`` leaves a value untouched."""

    data: Dict[str, Any] = cfg.model_dump()
    if seed is not None:
        data["seed"] = seed
    if workers is not None:
        data["workers"] = workers
    if strict is not None:
        data["strict"] = strict
    if alpha is not None:
        data["fusion"]["alpha"] = alpha
    return _validate(data, "command-line flags")


def dump_config(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def write_config(cfg: PipelineConfig, output_dir: Union[str, Path]) -> Path:
    target = Path(output_dir) / CONFIG_ECHO_NAME
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(dump_config(cfg), encoding="utf-8")
    return target


__all__ = [
    "CONFIG_ECHO_NAME",
    "CONFIG_ENV",
    "PipelineConfig",
    "SCHEMA_VERSION",
    "apply_overrides",
    "dump_config",
    "load_config",
    "write_config",
]
