import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

LOG_LEVEL_ENV = "FLLSIM_LOG_LEVEL"
PACKAGE_LOGGER = "fllsim"


def _default_level() -> int:
    name = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


def _formatter() -> logging.Formatter:
    return logging.Formatter(
        fmt="[%(asctime)s] [%(levelname)s] [%(name)s] : %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def _file_handler(log_file: Path) -> logging.FileHandler:
    log_file.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(log_file)
    handler.setFormatter(_formatter())
    return handler


def setup_logger(
    name: str,
    level: Optional[int] = None,
) -> logging.Logger:
    """
    Configure and return a logger.

    Parameters
    ----------
    name : str
        Logger name (usually __name__)
    level : int, optional
        Logging level. Defaults to the FLLSIM_LOG_LEVEL environment
        variable, or INFO when unset.
    """
    logger = logging.getLogger(name)
    logger.setLevel(level if level is not None else _default_level())

    # Avoid duplicated console handlers
    if not any(type(h) is logging.StreamHandler for h in logger.handlers):
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(_formatter())
        logger.addHandler(console_handler)

    return logger


@contextmanager
def log_to_file(log_file: Optional[Path], name: str = PACKAGE_LOGGER) -> Iterator[None]:
    """
    Copy every record of the `name` logger tree into `log_file` while the
    block runs; the handler is removed and closed on exit. No-op when
    log_file is None.
    """
    if log_file is None:
        yield
        return

    logger = logging.getLogger(name)
    handler = _file_handler(Path(log_file).resolve())
    logger.addHandler(handler)
    try:
        yield
    finally:
        logger.removeHandler(handler)
        handler.close()
