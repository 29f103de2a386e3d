"""Metal artifact reduction for circular cone-beam CT by prior-scan ray profile correction."""

import os

import numba

# TBB in the base image is too old for numba; skip it instead of warning on every launch.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
