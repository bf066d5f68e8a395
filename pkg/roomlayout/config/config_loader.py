"""
Config Loader - Load, merge and validate pipeline configuration.

Precedence, lowest first:
- defaults.json shipped next to this module
- environment settings (settings.py)
- a user JSON file passed with --config
- explicit CLI flags

The defaults file is read once and cached; every merge returns a fresh,
frozen PipelineConfig.
"""

import copy
import json
import os
from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from roomlayout.config import settings
from roomlayout.config.models import (
    EdgeConfig,
    ExtentConfig,
    QCConfig,
    SamplerConfig,
    SolverConfig,
    SyntheticConfig,
    TrackingConfig,
)
from roomlayout.exceptions import ConfigError


class PipelineConfig(BaseModel):
    """All algorithm parameters for one reconstruction."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    sampler: SamplerConfig = SamplerConfig()
    edges: EdgeConfig = EdgeConfig()
    tracking: TrackingConfig = TrackingConfig()
    solver: SolverConfig = SolverConfig()
    extent: ExtentConfig = ExtentConfig()
    qc: QCConfig = QCConfig()
    synthetic: SyntheticConfig = SyntheticConfig()

    def with_overrides(self, overrides: Dict[str, Dict[str, Any]]) -> "PipelineConfig":
        """Copy with section-wise overrides applied and re-validated."""
        merged = _deep_merge(self.model_dump(), overrides)
        return _validate(merged, "overrides")


def _deep_merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in (extra or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _validate(data: Dict[str, Any], source: str) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{source}: invalid value for '{field}': {first['msg']}") from e


class ConfigLoader:
    """Singleton config loader with validation and caching."""

    _instance: Optional["ConfigLoader"] = None

    def __new__(cls) -> "ConfigLoader":
        """Ensure singleton pattern."""
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self._initialized = True
        self.config_dir = os.path.dirname(__file__)
        self.defaults: Dict[str, Any] = self._load_json_file(
            os.path.join(self.config_dir, "defaults.json")
        )

    @staticmethod
    def _load_json_file(path: str) -> Dict[str, Any]:
        """Load one JSON object file, raising ConfigError on any problem."""
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return data

    def load(
        self,
        config_path: Optional[str] = None,
        cli_overrides: Optional[Dict[str, Dict[str, Any]]] = None,
    ) -> PipelineConfig:
        """
        Build the effective configuration.

        Args:
            config_path: Optional user JSON file (same shape as defaults.json).
            cli_overrides: Section-keyed values from explicit CLI flags.

        Returns:
            Validated PipelineConfig.
        """
        data = _deep_merge(self.defaults, settings.env_overrides())
        source = "defaults"
        if config_path:
            data = _deep_merge(data, self._load_json_file(config_path))
            source = config_path
        if cli_overrides:
            data = _deep_merge(data, cli_overrides)
            source = f"{source} + command line"
        return _validate(data, source)
