"""Desk-scale multi-object generation with regional semantic anchors and
adaptive multi-modal guidance."""

import os

# cap BLAS/OpenMP pools before numpy loads; one thread keeps runs bit-reproducible
_threads = os.environ.get("MOGEN_THREADS")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    if _threads is not None:
        os.environ[_var] = _threads
    else:
        os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
