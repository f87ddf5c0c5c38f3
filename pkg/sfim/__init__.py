"""Spatial/frequency multi-level restoration toolkit."""

import os

from sfim.settings import get_settings

# must run before numpy is imported anywhere in the process
_threads = get_settings().threads
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, str(_threads))

__version__ = "0.1.0"
