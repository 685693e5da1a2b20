"""Logging setup - console plus a timestamped log file"""

import logging
import os
import sys
from pathlib import Path
from typing import Optional

FALLBACK_LOG_FILE = os.path.join(os.path.expanduser("~"), "psc_log.txt")
LOG_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def _open_file_handler(path: str) -> logging.FileHandler:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return logging.FileHandler(path, encoding="utf-8")


def setup_logging(log_file: Optional[str] = None, level: str = "INFO") -> Optional[str]:
    """
    Configure the package logger.

    Returns the path actually written to, or None when file logging is off.
    If the requested file cannot be opened the home-directory fallback is used.
    """
    root = logging.getLogger("src")
    root.setLevel(level.upper())
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT, DATE_FORMAT)
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(formatter)
    root.addHandler(console)

    if not log_file:
        return None

    written_to = log_file
    try:
        file_handler = _open_file_handler(log_file)
    except OSError as e:
        written_to = FALLBACK_LOG_FILE
        file_handler = _open_file_handler(FALLBACK_LOG_FILE)
        root.warning("cannot open log file %s (%s); using %s", log_file, e, FALLBACK_LOG_FILE)

    file_handler.setFormatter(formatter)
    root.addHandler(file_handler)
    return written_to
