import logging
from contextlib import contextmanager

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(message)s"
PACKAGE_LOGGER = "src"


@contextmanager
def execution_log(path: str):
    """Copies every package log record at INFO and above into path while the block runs."""
    package_logger = logging.getLogger(PACKAGE_LOGGER)
    previous_level = package_logger.level
    if previous_level == logging.NOTSET or previous_level > logging.INFO:
        package_logger.setLevel(logging.INFO)
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package_logger.addHandler(handler)
    try:
        yield handler
    finally:
        package_logger.removeHandler(handler)
        handler.close()
        package_logger.setLevel(previous_level)
