import os
import logging
from dataclasses import dataclass
from functools import lru_cache

from dotenv import load_dotenv
load_dotenv()  # loads variables from .env into the environment

__version__ = "0.1.0"

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass(frozen=True)
class Settings:
    threads: int
    log_level: str
    database_url: str | None
    min_clean_accuracy: float
    config_dir: str


def _int_env(name, default):
    raw = os.environ.get(name, "").strip()
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        logging.getLogger(__name__).warning(f"Ignoring non-integer {name}={raw!r}, using {default}")
        return default


def _float_env(name, default):
    raw = os.environ.get(name, "").strip()
    if not raw:
        return default
    try:
        return float(raw)
    except ValueError:
        logging.getLogger(__name__).warning(f"Ignoring non-numeric {name}={raw!r}, using {default}")
        return default


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Read runtime settings from the environment (and .env)"""
    return Settings(
        threads=max(1, _int_env("TGR_THREADS", 1)),
        log_level=os.environ.get("TGR_LOG_LEVEL", "INFO").upper(),
        database_url=os.environ.get("TGR_DATABASE_URL") or None,
        min_clean_accuracy=_float_env("TGR_MIN_CLEAN_ACCURACY", 0.95),
        config_dir=os.environ.get("TGR_CONFIG_DIR", "config"),
    )


def configure_logging(level=None):
    """Configure root logging once; stderr only so result files stay clean"""
    level = level or get_settings().log_level
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)
    logging.getLogger().setLevel(getattr(logging, level, logging.INFO))
