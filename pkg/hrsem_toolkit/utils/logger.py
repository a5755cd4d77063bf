"""Logging configuration"""
import logging
import sys
from pathlib import Path
from typing import Optional


class _MaxLevelFilter(logging.Filter):
    def __init__(self, max_level: int):
        super().__init__()
        self.max_level = max_level

    def filter(self, record: logging.LogRecord) -> bool:
        return record.levelno <= self.max_level


def setup_logger(name: str, level: str = 'INFO', log_file: Optional[str] = None) -> logging.Logger:
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s', datefmt='%H:%M:%S')

    if not getattr(logger, '_hrsem_configured', False):
        # info goes to stdout, warnings and errors to stderr
        out_handler = logging.StreamHandler(sys.stdout)
        out_handler.setFormatter(formatter)
        out_handler.addFilter(_MaxLevelFilter(logging.INFO))
        err_handler = logging.StreamHandler(sys.stderr)
        err_handler.setFormatter(formatter)
        err_handler.setLevel(logging.WARNING)
        logger.addHandler(out_handler)
        logger.addHandler(err_handler)
        logger.propagate = False
        logger._hrsem_configured = True

    if log_file:
        path = Path(log_file)
        if not any(isinstance(h, logging.FileHandler) and Path(h.baseFilename) == path.resolve()
                   for h in logger.handlers):
            path.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(path)
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)

    return logger
