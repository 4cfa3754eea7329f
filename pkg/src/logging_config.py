"""
Logging configuration for the REBEL toolkit
"""

import logging
import os
import sys


def get_default_level() -> int:
    """Get the default log level from the REBEL_LOG_LEVEL environment variable"""
    name = os.getenv("REBEL_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


def setup_logging(
    level: int | None = None, format_string: str | None = None, log_file: str | None = None
) -> None:
    """
    Setup logging configuration for the toolkit

    Args:
        level: Logging level (default: REBEL_LOG_LEVEL or INFO)
        format_string: Custom format string for log messages
        log_file: Optional file path to write logs to
    """
    if level is None:
        level = get_default_level()
    if format_string is None:
        format_string = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    formatter = logging.Formatter(format_string)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # Clear any existing handlers
    root_logger.handlers.clear()

    # Console handler; stderr keeps stdout free for tables and check lines
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger instance with the specified name

    Args:
        name: Logger name (usually __name__)

    Returns:
        Configured logger instance
    """
    return logging.getLogger(name)
