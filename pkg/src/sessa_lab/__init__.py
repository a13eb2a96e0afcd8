"""Numerical laboratory for attention-in-feedback sequence mixers.

Set ``SESSA_LAB_THREADS`` before the first import to cap BLAS/OpenMP workers.
"""
import os

_threads = os.environ.get("SESSA_LAB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from .errors import (  # noqa: E402
    CacheError, CheckFailure, CheckpointError, ConfigError, DomainError, FitDomainError,
    InputError, RegimeError, SessaLabError, TrainingError,
)
from .kernels import BACKEND  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CacheError", "CheckFailure", "CheckpointError", "ConfigError", "DomainError",
    "FitDomainError", "InputError", "RegimeError", "SessaLabError", "TrainingError",
    "__version__",
]
