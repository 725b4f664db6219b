import logging
import os
from typing import Optional

from src.core.errors import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV = "POOLSCREEN_THREADS"


def resolve_n_jobs(requested: Optional[int] = None) -> int:
    """
    Resolves the joblib worker count.
    POOLSCREEN_THREADS caps the count (0 or unset = no cap); requested=None/0 means "as many as allowed".
    Returns -1 when joblib should use every core.
    """
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'")
    if cap < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0, got {cap}")

    if not requested:
        return cap if cap > 0 else -1
    if requested < 0:
        return cap if cap > 0 else requested
    return min(requested, cap) if cap > 0 else requested
