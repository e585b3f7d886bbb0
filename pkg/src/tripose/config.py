import os
from dataclasses import dataclass

from dotenv import load_dotenv


@dataclass
class Settings:
    data_dir: str
    log_level: str
    workers: int


def _load_workers() -> int:
    raw = os.getenv("TRIPOSE_WORKERS", "1").strip() or "1"
    try:
        workers = int(raw)
    except ValueError as exc:
        raise RuntimeError(f"TRIPOSE_WORKERS must be an integer, got {raw!r}") from exc
    if workers < 1:
        raise RuntimeError("TRIPOSE_WORKERS must be at least 1")
    return workers


def load_settings() -> Settings:
    load_dotenv()
    return Settings(
        data_dir=os.getenv("TRIPOSE_DATA_DIR", "./data"),
        log_level=os.getenv("TRIPOSE_LOG_LEVEL", "info"),
        workers=_load_workers(),
    )
