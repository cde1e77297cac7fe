from pathlib import Path
import hashlib
import logging
from typing import Optional, Tuple

# --------------------
#     CONSTANTS
# --------------------
INFO = logging.INFO
DEBUG = logging.DEBUG
WARNING = logging.WARNING
ERROR = logging.ERROR

PACKAGE_LOGGER = "src"
RUN_LOG_FILE = "run.log"


def ensure_directory(directory: Path) -> Path:
    """
    Create a directory (and parents) if it doesn't exist.

    Returns:
        The directory as an absolute Path.
    """
    directory = Path(directory).resolve()
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _create_formatter() -> logging.Formatter:
    """Create standard log formatter with timestamp and level."""
    return logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")


def _create_handlers(
    level: int, log_file: Optional[Path] = None
) -> Tuple[logging.StreamHandler, Optional[logging.FileHandler]]:
    """Create configured console (and optional file) logging handlers."""
    formatter = _create_formatter()

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)

    file_handler = None
    if log_file is not None:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)

    return console_handler, file_handler


def setup_logger(name: str, level: int = INFO) -> logging.Logger:
    """
    Configure logger with console output.

    File output is attached per run with attach_run_log, so that nothing is
    written outside the run's output directory.

    Args:
        name: Logger name, typically __name__.
        level: Logging level. Defaults to INFO.

    Returns:
        Configured logger instance.
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Prevents adding handlers multiple times if logger is called more than once
    if not logger.handlers:
        console_handler, _ = _create_handlers(level)
        logger.addHandler(console_handler)

    return logger


def attach_run_log(out_dir: Path, level: int = INFO) -> logging.FileHandler:
    """
    Send every package log record of this run to <out_dir>/logs/run.log.

    Returns:
        The attached handler, so the caller can detach it with detach_run_log.
    """
    log_directory = ensure_directory(Path(out_dir) / "logs")
    _, file_handler = _create_handlers(level, log_directory / RUN_LOG_FILE)

    package_logger = logging.getLogger(PACKAGE_LOGGER)
    package_logger.setLevel(min(package_logger.level or level, level))
    package_logger.addHandler(file_handler)
    return file_handler


def detach_run_log(handler: logging.FileHandler) -> None:
    """Remove and close a handler added by attach_run_log."""
    logging.getLogger(PACKAGE_LOGGER).removeHandler(handler)
    handler.close()


def log_stage_timing(
    logger: logging.Logger,
    stage: str,
    item_count: int,
    execution_time: float,
    expected_rate: float,
) -> None:
    """Log a finished stage with performance analysis.

    Args:
        logger: Logger instance to use for output.
        stage: Description of the stage (e.g. "assembly rows").
        item_count: Number of items processed by the stage.
        execution_time: Time taken for the stage in seconds.
        expected_rate: Expected time per item threshold.
    """
    logger.info(f"{stage}: {item_count} items in {execution_time:.4f} seconds")

    # Conditional check to prevent ZeroDivisionError
    if item_count == 0:
        logger.warning(f"{stage}: processed 0 items. Performance check skipped.")
        return

    time_per_item = execution_time / item_count

    if time_per_item <= expected_rate:
        logger.debug(f"{stage}: {time_per_item:.6f} seconds per item (OK)")
    else:
        logger.warning(
            f"{stage}: time per item exceeds {expected_rate:.6f}s: "
            f"{time_per_item:.6f} seconds (SLOW)"
        )


def sha256_text(text: str) -> str:
    """Hex sha256 of a UTF-8 string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_bytes(*chunks: bytes) -> str:
    """Hex sha256 over the concatenation of byte chunks."""
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(chunk)
    return digest.hexdigest()
