"""Diagnostics to standard error, controlled by the LIBCTX_LOG env var.

LIBCTX_LOG=trace enables per-event tracing, =info (default) reports
lifecycle messages, =off silences everything.
"""

import logging
import os
import sys

_LEVELS = {"trace": 5, "info": logging.INFO, "off": logging.CRITICAL + 10}

TRACE = 5
logging.addLevelName(TRACE, "TRACE")


def get_logger(name: str = "libctx") -> logging.Logger:
    logger = logging.getLogger(name)
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("libctx[%(process)d] %(levelname)s %(message)s"))
        logger.addHandler(handler)
        logger.propagate = False
        level = os.environ.get("LIBCTX_LOG", "info").strip().lower()
        logger.setLevel(_LEVELS.get(level, logging.INFO))
    return logger


def trace(logger: logging.Logger, msg: str, *args) -> None:
    if logger.isEnabledFor(TRACE):
        logger.log(TRACE, msg, *args)
