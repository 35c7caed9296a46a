import os
from typing import Optional

LOG_LEVEL_ENV = "LOG_LEVEL"
OUT_DIR_ENV = "DBGC_OUT_DIR"


def log_level() -> str:
    return os.environ.get(LOG_LEVEL_ENV, "INFO").upper()


def output_dir_override() -> Optional[str]:
    """Output directory from the environment, or None when unset or blank."""
    value = os.environ.get(OUT_DIR_ENV, "").strip()
    return value or None
