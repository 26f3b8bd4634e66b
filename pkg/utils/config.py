"""
Run configuration: one pydantic section per component, loaded from TOML or JSON,
then overridden by command-line flags. Secrets come only from the environment.
"""

import json
import logging
import os
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from utils.grpo_objective import GrpoConfig
from utils.policy_model import PolicyConfig
from utils.reward_rules import RewardConfig
from utils.schemas import DrivingTask

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

JUDGE_KEY_ENV = "JUDGE_API_KEY"


class ConfigError(ValueError):
    """Raised for unreadable config files and rejected sections or keys"""


class JudgeBackend(str, Enum):
    MOCK = "mock"
    HTTP = "http"


class JudgeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    backend: JudgeBackend = JudgeBackend.MOCK
    url: Optional[str] = None
    model: str = "gpt-4o-mini"
    temperature: float = Field(default=0.0, ge=0.0)
    timeout_s: float = Field(default=30.0, gt=0.0)
    max_retries: int = Field(default=2, ge=0)
    concurrency: int = Field(default=4, ge=1)
    # Optional on-disk map from request hash to score
    cache_path: Optional[str] = None


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    train_path: Optional[str] = None
    validation_path: Optional[str] = None
    # Empty means every task kind
    task_filter: List[DrivingTask] = Field(default_factory=list)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    grpo: GrpoConfig = Field(default_factory=GrpoConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    judge: JudgeConfig = Field(default_factory=JudgeConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)


def _describe(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        location = ".".join(str(part) for part in err["loc"])
        parts.append(f"{location}: {err['msg']}")
    return "; ".join(parts)


def _read_mapping(path: Path) -> Dict[str, Any]:
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as handle:
                return tomllib.load(handle)
        if path.suffix == ".json":
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be an object")
            return data
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: cannot parse config: {e}") from e
    raise ConfigError(f"{path}: config files must be .toml or .json")


def build_config(data: Mapping[str, Any], source: str = "config") -> RunConfig:
    try:
        return RunConfig.model_validate(dict(data))
    except ValidationError as e:
        raise ConfigError(f"{source}: {_describe(e)}") from e


def load_run_config(path: Optional[os.PathLike] = None) -> RunConfig:
    """Built-in defaults, replaced section by section by the file at path"""
    if path is None:
        return RunConfig()
    path = Path(path)
    config = build_config(_read_mapping(path), source=str(path))
    logger.info(f"Loaded run config from {path}")
    return config


def apply_overrides(config: RunConfig, overrides: Mapping[str, Mapping[str, Any]]) -> RunConfig:
    """Merge {section: {key: value}} over config; None values are ignored"""
    data = config.model_dump(mode="json")
    for section, values in overrides.items():
        for key, value in values.items():
            if value is None:
                continue
            data.setdefault(section, {})[key] = value
    return build_config(data, source="command-line overrides")


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json")


def judge_api_key() -> Optional[str]:
    """JUDGE_API_KEY from the environment, after loading a .env file if present"""
    load_dotenv()
    return os.getenv(JUDGE_KEY_ENV)
