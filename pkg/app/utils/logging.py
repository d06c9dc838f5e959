import sys
from typing import Optional

from loguru import logger

STDERR_FORMAT = "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level}</level> | {message}"
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level} | {message}"


def setup_logging(level: str = "INFO", log_file: Optional[str] = None, quiet: bool = False) -> None:
    """Install the stderr sink (and an optional DEBUG file sink).

    stdout is reserved for data and output paths, so nothing is logged there.
    """
    logger.remove()  # Remove default handler
    logger.add(sys.stderr, format=STDERR_FORMAT, level="WARNING" if quiet else level.upper())
    if log_file:
        logger.add(log_file, format=FILE_FORMAT, level="DEBUG")


def progress_logger(every: int):
    """Progress sink for chains: logs every `every` iterations."""

    def _sink(iteration: int, total: int) -> None:
        if iteration % every == 0 or iteration == total:
            logger.info(f"⏱️  iteration {iteration}/{total}")

    return _sink
