"""
Configuration loading for coplan.

The packaged config.yaml holds every default; a user file passed with
--config only needs the keys it changes.
"""

import copy
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

logger = logging.getLogger(__name__)

PACKAGE_CONFIG = Path(__file__).parent / "config.yaml"


class ConfigError(ValueError):
    """Raised when a configuration file cannot be read or is malformed."""


def _read_yaml(path: Path) -> Dict[str, Any]:
    try:
        with path.open() as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file {path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a mapping, got {type(data).__name__}")
    return data


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Load the packaged configuration, optionally overridden by a user file.

    Args:
        path: Optional YAML file whose keys override the packaged defaults

    Returns:
        Nested configuration dictionary
    """
    config = _read_yaml(PACKAGE_CONFIG)
    if path is not None:
        user = _read_yaml(Path(path))
        logger.debug("Merging user config from %s", path)
        config = _deep_merge(config, user)
    return config
