"""
config.py - Centralized configuration management
"""

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from constants import (
    DEFAULT_SEED,
    SCENARIOS_DIR,
)
from exceptions import ConfigurationError, InputError


@dataclass
class Config:
    """Application configuration."""

    # Logging
    log_level: str = "INFO"
    log_file: Path | None = None

    # Reproducibility
    seed: int = DEFAULT_SEED

    # Paths
    scenarios_dir: Path = SCENARIOS_DIR

    @classmethod
    def load(cls, env_file: Path | None = None) -> "Config":
        """
        Load configuration from environment variables.

        Args:
            env_file: Optional path to .env file

        Returns:
            Config instance with values from environment
        """
        if env_file is None:
            env_file = Path(__file__).parent / ".env"

        if env_file.exists():
            load_dotenv(env_file)

        log_file = os.getenv("TRAJSIGHT_LOG_FILE")
        try:
            seed = int(os.getenv("TRAJSIGHT_SEED", str(DEFAULT_SEED)))
        except ValueError as e:
            raise ConfigurationError(f"TRAJSIGHT_SEED must be an integer: {e}") from e

        return cls(
            log_level=os.getenv("TRAJSIGHT_LOG_LEVEL", "INFO"),
            log_file=Path(log_file) if log_file else None,
            seed=seed,
            scenarios_dir=Path(os.getenv("TRAJSIGHT_SCENARIOS_DIR", str(SCENARIOS_DIR))),
        )


# Global config instance (lazy-loaded)
_config: Config | None = None


def get_config() -> Config:
    """
    Get the global configuration instance.

    Returns:
        Config instance
    """
    global _config
    if _config is None:
        _config = Config.load()
    return _config


def read_json(path: Path) -> Any:
    """
    Read a JSON input file.

    Raises:
        InputError: If the file is missing or is not valid JSON; the message
            names the path and, for parse errors, the line and column.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"File not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8-sig"))
    except json.JSONDecodeError as e:
        raise InputError(
            f"Invalid JSON in {path} at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e


def split_known(payload: dict, known: set[str], section: str) -> dict:
    """Return payload restricted to known keys; unknown keys are a configuration error."""
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigurationError(f"Unknown {section} config keys: {', '.join(unknown)}")
    return dict(payload)
