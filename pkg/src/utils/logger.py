"""
Logger Module
Configures and manages logging for the framework
"""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Union


def setup_logger(name: str, log_file: Optional[Union[str, Path]] = None,
                 level: str = "INFO") -> logging.Logger:
    """Set up logger with a console handler and an optional file handler"""

    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, level.upper()))

    # Remove existing handlers to avoid duplicates
    logger.handlers = []
    logger.propagate = False

    detailed_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
    )
    simple_formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s',
        datefmt='%H:%M:%S'
    )

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(getattr(logging, level.upper()))
    console_handler.setFormatter(simple_formatter)
    logger.addHandler(console_handler)

    if log_file is not None:
        log_file = Path(log_file)
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(detailed_formatter)
        logger.addHandler(file_handler)

    return logger


def get_logger(name: str) -> logging.Logger:
    """Get an existing logger"""
    return logging.getLogger(name)


class RunLogWriter:
    """Append-only JSON-lines log, one record per training epoch"""

    def __init__(self, path: Optional[Union[str, Path]]):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: Dict[str, Any]) -> None:
        if self.path is None:
            return
        with open(self.path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
