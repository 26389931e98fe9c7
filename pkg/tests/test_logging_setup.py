from __future__ import annotations

import logging

from nashrate.logging_setup import LOG_FORMAT, build_handlers, setup_logging


def test_stderr_only_without_file():
    handlers = build_handlers(None)
    assert len(handlers) == 1
    assert isinstance(handlers[0], logging.StreamHandler)


def test_file_handler_writes_records(tmp_path):
    path = tmp_path / "logs" / "run.log"
    handlers = build_handlers(str(path))
    try:
        assert isinstance(handlers[-1], logging.FileHandler)
        file_handler = handlers[-1]
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        record = logging.LogRecord("nashrate.solver", logging.INFO, __file__, 1, "solved in %d", (12,), None)
        file_handler.emit(record)
        file_handler.flush()
    finally:
        for h in handlers:
            h.close()
    text = path.read_text(encoding="utf-8")
    assert "solved in 12" in text
    assert "nashrate.solver" in text
    assert "[MainThread]" in text


def test_existing_handlers_only_change_level():
    root = logging.getLogger()
    before_level = root.level
    before_handlers = list(root.handlers)
    added = None
    if not root.handlers:
        added = logging.NullHandler()
        root.addHandler(added)
    try:
        setup_logging("debug")
        assert root.level == logging.DEBUG
        assert len(root.handlers) == len(before_handlers) + (1 if added else 0)
    finally:
        root.setLevel(before_level)
        if added is not None:
            root.removeHandler(added)
