"""
Config - YAML configuration loading with environment expansion
"""

import os
from typing import Any, Dict, Optional, Type, TypeVar

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from tools.errors import InvalidParameter

DEFAULT_CONFIG_FILE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "mosaic.yaml")


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Load a YAML config file, expanding ${VAR} references first"""
    path = path or DEFAULT_CONFIG_FILE
    if not os.path.exists(path):
        raise InvalidParameter(f"config file not found: {path}")
    with open(path, "r") as f:
        content = os.path.expandvars(f.read())
    try:
        data = yaml.safe_load(content)
    except yaml.YAMLError as e:
        raise InvalidParameter(f"config file {path} is not valid YAML: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidParameter(f"config file {path} must hold a mapping of sections")
    return data


def merge_overrides(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge `overrides` into a copy of `base`; None values are skipped"""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            current = merged.get(key)
            merged[key] = merge_overrides(current if isinstance(current, dict) else {}, value)
        else:
            merged[key] = value
    return merged


def dump_config(data: Dict[str, Any]) -> str:
    """Deterministic YAML rendering used for provenance headers"""
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=False)


class StageConfig(BaseModel):
    """Base for every stage configuration: immutable, unknown keys rejected"""

    model_config = ConfigDict(frozen=True, extra="forbid")


M = TypeVar("M", bound=BaseModel)


def build_model(cls: Type[M], data: Optional[Dict[str, Any]] = None, **overrides) -> M:
    """Validate `data` (+ keyword overrides) into `cls`, raising InvalidParameter"""
    payload = merge_overrides(dict(data or {}), overrides)
    try:
        return cls.model_validate(payload)
    except ValidationError as e:
        raise InvalidParameter(f"invalid {cls.__name__}: {e}")
