"""
Logging configuration for engine simulation and training runs

One console handler (INFO, short timestamps) and one rotating file handler
(DEBUG, logger name and line number) are shared by the run logger and the
package loggers, so `get_logger(__name__)` inside engine/, agent/, analysis/
and shared/ writes to the run's console and log file.
"""

import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import List, Optional

PACKAGE_LOGGERS = ("engine", "agent", "analysis", "shared")

CONSOLE_FORMAT = "%(asctime)s | %(levelname)-8s | %(message)s"
CONSOLE_DATEFMT = "%H:%M:%S"
FILE_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s:%(lineno)d | %(message)s"
FILE_DATEFMT = "%Y-%m-%d %H:%M:%S"


def _run_handlers(
    log_file: Optional[str],
    console_level: int,
    file_level: int,
    max_bytes: int,
    backup_count: int,
) -> List[logging.Handler]:
    console = logging.StreamHandler(sys.stdout)
    console.setLevel(console_level)
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT, datefmt=CONSOLE_DATEFMT))
    handlers: List[logging.Handler] = [console]

    if log_file is not None:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        rotating = RotatingFileHandler(log_path, maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8")
        rotating.setLevel(file_level)
        rotating.setFormatter(logging.Formatter(FILE_FORMAT, datefmt=FILE_DATEFMT))
        handlers.append(rotating)
    return handlers


def setup_logger(
    name: str = "qhe",
    log_file: Optional[str] = "qhe.log",
    console_level: int = logging.INFO,
    file_level: int = logging.DEBUG,
    max_bytes: int = 10 * 1024 * 1024,  # 10MB
    backup_count: int = 5,
) -> logging.Logger:
    """
    Attach console and file handlers to the run logger and the package loggers

    Args:
        name: Run logger name (default: "qhe")
        log_file: Path to log file, usually inside the run's output directory; None for console only
        console_level: Console logging level (default: INFO)
        file_level: File logging level (default: DEBUG)
        max_bytes: Max size per log file before rotation (default: 10MB)
        backup_count: Number of backup files to keep (default: 5)

    Returns:
        The run logger
    """
    logger = logging.getLogger(name)

    # Already configured for this process
    if logger.handlers:
        return logger

    handlers = _run_handlers(log_file, console_level, file_level, max_bytes, backup_count)
    for logger_name in {name, *PACKAGE_LOGGERS}:
        target = logging.getLogger(logger_name)
        target.setLevel(logging.DEBUG)  # handlers filter
        target.propagate = False
        for handler in handlers:
            target.addHandler(handler)
    return logger


def teardown_logger(name: str = "qhe") -> None:
    """Detach and close every handler installed by setup_logger"""
    closed = set()
    for logger_name in {name, *PACKAGE_LOGGERS}:
        target = logging.getLogger(logger_name)
        for handler in list(target.handlers):
            target.removeHandler(handler)
            if id(handler) not in closed:
                closed.add(id(handler))
                handler.close()


def get_logger(name: str = "qhe") -> logging.Logger:
    return logging.getLogger(name)
