"""Variational embedding learning for cold-start CTR prediction.

Importing the package pins the BLAS thread pools before numpy loads:
reductions inside threaded GEMM are not associative-stable, so the
deterministic default is one thread.  Set VELF_THREADS to widen the cap
for this process and for worker pools spawned by the CLI.
"""

import os as _os


def _pin_threads() -> None:
    n = _os.environ.get("VELF_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ.setdefault(var, n)


_pin_threads()

__version__ = "0.1.0"
