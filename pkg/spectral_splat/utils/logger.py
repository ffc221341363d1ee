"""
Centralized logging configuration for the spectral splatting workbench.

Console records go to stderr so stdout stays free for the JSON-lines
training log; a rotating file under SPECTRAL_SPLAT_LOG_DIR keeps DEBUG
detail (per-iteration chatter, cache hits, solver sweeps).

Directory and level are read when a logger is first built, after .env has
been loaded, so both can come from the environment or the .env file.
"""

import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

DEFAULT_LOG_DIR = os.path.join(
    os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))), "logs"
)
LOG_FILE_NAME = "workbench.log"

MAX_BYTES = 5 * 1024 * 1024
BACKUPS = 3

_CONSOLE_FMT = logging.Formatter("[%(asctime)s] %(levelname)-8s %(name)s | %(message)s", datefmt="%H:%M:%S")
_FILE_FMT = logging.Formatter("[%(asctime)s] %(levelname)-8s %(name)s:%(lineno)d | %(message)s")


def log_dir() -> str:
    return os.getenv("SPECTRAL_SPLAT_LOG_DIR", DEFAULT_LOG_DIR)


def console_level() -> int:
    name = os.getenv("SPECTRAL_SPLAT_LOG_LEVEL", "INFO").upper()
    return getattr(logging, name, logging.INFO)


def _console_handler() -> logging.Handler:
    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(console_level())
    handler.setFormatter(_CONSOLE_FMT)
    return handler


def _file_handler(directory: str) -> Optional[logging.Handler]:
    """Rotating DEBUG log; None when the log directory cannot be created (read-only checkouts)."""
    try:
        os.makedirs(directory, exist_ok=True)
        handler = RotatingFileHandler(
            os.path.join(directory, LOG_FILE_NAME), maxBytes=MAX_BYTES, backupCount=BACKUPS, encoding="utf-8"
        )
    except OSError:
        return None
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(_FILE_FMT)
    return handler


def get_logger(name: str) -> logging.Logger:
    """Get a configured logger instance (handlers are attached once per name)."""
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger

    logger.setLevel(logging.DEBUG)
    logger.propagate = False
    logger.addHandler(_console_handler())
    directory = log_dir()
    file_handler = _file_handler(directory)
    if file_handler is None:
        logger.warning(f"Log directory {directory} is not writable; logging to the console only")
    else:
        logger.addHandler(file_handler)
    return logger
