"""
logging_config.py - Centralized logging configuration for trajsight
"""

import logging
import sys
from pathlib import Path
from typing import Optional

from exceptions import ConfigurationError

LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def parse_level(level: str) -> int:
    """
    Map a level name to its logging constant.

    Raises:
        ConfigurationError: If the name is not a standard level.
    """
    name = str(level).strip().upper()
    if name not in LEVELS:
        raise ConfigurationError(f"Unknown log level {level!r}; expected one of {', '.join(LEVELS)}")
    return getattr(logging, name)


def setup_logging(
    level: str = "INFO",
    log_file: Optional[Path] = None,
    format_string: Optional[str] = None
) -> None:
    """
    Configure logging for a CLI run or an analysis script.

    Records go to stderr and, when log_file is set, to that file as well.
    Python warnings (numpy overflow and the like) are routed into the
    `py.warnings` logger so they land in the same place.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional file path to write logs to
        format_string: Optional custom format string
    """
    numeric_level = parse_level(level)

    # CLI tables and predictions go to stdout
    handlers = [logging.StreamHandler(sys.stderr)]

    if log_file:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=numeric_level,
        format=format_string or DEFAULT_FORMAT,
        handlers=handlers,
        force=True
    )
    logging.captureWarnings(True)

    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("shapely").setLevel(logging.WARNING)
