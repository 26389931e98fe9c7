from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Optional

from nashrate.config import settings


LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s [%(threadName)s]: %(message)s"


def build_handlers(log_file: Optional[str]) -> list[logging.Handler]:
    # stdout carries the JSON printed by the CLI
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(path, encoding="utf-8"))
    return handlers


def setup_logging(level: Optional[str] = None) -> None:
    level_name = (level or settings.LOG_LEVEL).upper()
    level_no = getattr(logging, level_name, logging.INFO)

    root = logging.getLogger()
    if root.handlers:
        root.setLevel(level_no)
        return

    logging.basicConfig(level=level_no, format=LOG_FORMAT, handlers=build_handlers(settings.LOG_FILE))

    logging.getLogger("asyncio").setLevel(logging.WARNING)
    logging.getLogger("hypothesis").setLevel(logging.WARNING)
