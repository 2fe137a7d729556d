from __future__ import annotations

import logging
import os

logger = logging.getLogger(__name__)

THREADS_ENV = "METAFORGE_THREADS"


def worker_count(requested: int | None = None) -> int:
    """Thread-pool size, capped by ``METAFORGE_THREADS`` when it is set."""
    n = requested if requested and requested > 0 else (os.cpu_count() or 1)
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, raw)
        else:
            n = min(n, max(1, cap))
    return max(1, n)
