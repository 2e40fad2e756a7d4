"""Next-frame video prediction with memory-generated dynamic filters and non-local context propagation."""

import os

# BLAS thread pools are sized when numpy loads, so the caps go in first.
# VIDPRED_DETERMINISTIC pins one thread: threaded reductions may sum in a
# different order from run to run.
_threads = os.environ.get("VIDPRED_THREADS")
if os.environ.get("VIDPRED_DETERMINISTIC", "").lower() in ("1", "true", "yes"):
    _threads = "1"
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

__version__ = "0.1.0"
