from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


def _dotenv_file() -> str | None:
    if os.environ.get("DISABLE_DOTENV") == "1":
        return None
    return ".env" if Path(".env").exists() else None


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=_dotenv_file(),
        env_file_encoding="utf-8",
        extra="ignore",
    )

    OUT_DIR: str = "data/reports"

    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None

    SOLVER_TOLERANCE: float = 1e-8
    SOLVER_MAX_ITERATIONS: int = 20000
    SOLVER_INITIAL_MULTIPLIER: float = 1.0

    MECH_ETA: float = 1e-3
    MECH_ZETA: float = 1e-3

    BR_EPSILON: float = 1e-6
    BR_MAX_ROUNDS: int = 40
    BR_INNER_ITERATIONS: int = 300
    BR_PROFILE_TOL: float = 1e-7
    BR_DEVIATION_SAMPLES: int = 1000
    BR_PERTURBED_STARTS: int = 2

    VERIFY_TOLERANCE: float = 1e-7
    ETA_MAX_SHRINKS: int = 6
    HESSIAN_MARGIN: float = 1e-8

    SWEEP_WORKERS: int = 2


settings = Settings()
