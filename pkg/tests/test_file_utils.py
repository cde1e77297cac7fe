import logging

from utils.file_utils import (
    attach_run_log,
    detach_run_log,
    ensure_directory,
    log_stage_timing,
    setup_logger,
    sha256_bytes,
    sha256_text,
)


def test_ensure_directory_creates_nested(tmp_path):
    target = ensure_directory(tmp_path / "a" / "b")
    assert target.is_dir()
    assert target.is_absolute()


def test_setup_logger_adds_one_handler():
    first = setup_logger("src.test_utils_logger")
    second = setup_logger("src.test_utils_logger")
    assert first is second
    assert len(second.handlers) == 1


def test_run_log_collects_package_records(tmp_path):
    handler = attach_run_log(tmp_path)
    try:
        setup_logger("src.some.module").info("hello from the run")
    finally:
        detach_run_log(handler)
    text = (tmp_path / "logs" / "run.log").read_text(encoding="utf-8")
    assert "hello from the run" in text
    assert handler not in logging.getLogger("src").handlers


def test_log_stage_timing(mocker):
    logger = mocker.Mock()
    log_stage_timing(logger, "rows", 10, 1.0, 0.01)
    logger.warning.assert_called_once()
    logger.reset_mock()
    log_stage_timing(logger, "rows", 10, 0.01, 0.01)
    logger.warning.assert_not_called()
    log_stage_timing(logger, "rows", 0, 0.0, 0.01)
    logger.warning.assert_called_once()


def test_hashes():
    empty = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert sha256_text("") == empty
    assert sha256_bytes(b"ab", b"c") == sha256_bytes(b"abc")
