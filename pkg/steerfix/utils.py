import datetime
import logging
import os
import time
from pathlib import Path
from typing import Sequence, Union

import numpy as np

PathLike = Union[str, os.PathLike]

THREADS_ENV = 'STEERFIX_THREADS'


class RuntimeFormatter(logging.Formatter):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.start_time = time.time()

    def formatTime(self, record, datefmt=None):
        duration = datetime.datetime.fromtimestamp(
            record.created - self.start_time, tz=datetime.timezone.utc
        )
        elapsed = duration.strftime('%H:%M:%S.%f')
        return "{}".format(elapsed)


def get_logger(level: int = logging.INFO) -> logging.Logger:
    """
    Attach a stream handler with elapsed-time stamps to the root logger.

    Calling this more than once does not duplicate the handler.

    Parameters
    ----------
    level : int, optional
        Logging level of the root logger, by default ``logging.INFO``.

    Returns
    -------
    logger : logging.Logger
        The configured root logger.
    """
    LOGFORMAT = '%(asctime)s - %(levelname)-9s: %(message)s'
    logger = logging.getLogger()
    if not any(isinstance(h.formatter, RuntimeFormatter) for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(RuntimeFormatter(LOGFORMAT))
        logger.addHandler(handler)
    logger.setLevel(level)
    return logger


def thread_count(default: int = 1) -> int:
    """
    Number of intra-op threads requested through ``STEERFIX_THREADS``.

    Parameters
    ----------
    default : int, optional
        Value used when the variable is unset, by default 1.

    Returns
    -------
    threads : int
        Requested thread count (at least 1).
    """
    raw = os.environ.get(THREADS_ENV)
    if raw is None or not raw.strip():
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        logging.getLogger(__name__).warning(
            f"Ignoring non-integer {THREADS_ENV}={raw!r}; using {default}."
        )
        return default


def ensure_dir(path: PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def parse_shape(text: str) -> tuple:
    """
    Parse a kernel shape such as ``3x3`` or ``5X5``.

    Parameters
    ----------
    text : str
        Shape as ``<h>x<w>``.

    Returns
    -------
    shape : tuple of int
        Pair ``(h, w)``.
    """
    parts = text.lower().split('x')
    if len(parts) != 2 or not all(p.strip().isdigit() for p in parts):
        raise ValueError(f"Expected a shape like '3x3', got {text!r}")
    h, w = (int(p) for p in parts)
    if h < 1 or w < 1:
        raise ValueError(f"Kernel dimensions must be positive, got {text!r}")
    return h, w


def as_float32(values: Union[Sequence[float], np.ndarray]) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float32)
