"""Hot inner-loop kernels with a numba fast path and a numpy fallback.

The two kernels that dominate a training step outside of BLAS are the
scatter-add that folds row gradients back into embedding tables and the
fused Adam update.  Both exist twice: a plain-numpy version and the same
loop under ``numba.njit``.  Set VELF_NUMBA=0 to force the numpy path
(useful when numba is absent or when profiling the fallback; see
benchmarks/bench_kernels.py).

Both paths apply the identical per-element operation sequence, so their
outputs are bitwise equal.  Callers must pass every scalar already cast
to the array dtype, including the (1 - beta) complements: mixed-dtype
scalar math promotes differently under numba than under numpy 2.x and
would silently break that equality.
"""

import os

import numpy as np


def _scatter_add_rows_loop(table_grad, indices, row_grads):
    m, d = row_grads.shape
    for r in range(m):
        i = indices[r]
        for c in range(d):
            table_grad[i, c] += row_grads[r, c]


def _scatter_add_rows_numpy(table_grad, indices, row_grads):
    # unbuffered in-place add; repeated indices accumulate in row order,
    # matching the explicit loop
    np.add.at(table_grad, indices, row_grads)


def _adam_update_loop(param, grad, m, v, lr, beta1, beta2, omb1, omb2, eps,
                      bc1, bc2):
    n = param.shape[0]
    for i in range(n):
        g = grad[i]
        m[i] = beta1 * m[i] + omb1 * g
        v[i] = beta2 * v[i] + omb2 * (g * g)
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        param[i] -= lr * (mhat / (np.sqrt(vhat) + eps))


def _adam_update_numpy(param, grad, m, v, lr, beta1, beta2, omb1, omb2, eps,
                       bc1, bc2):
    m[:] = beta1 * m + omb1 * grad
    v[:] = beta2 * v + omb2 * (grad * grad)
    mhat = m / bc1
    vhat = v / bc2
    param -= lr * (mhat / (np.sqrt(vhat) + eps))


def _numba_wanted() -> bool:
    flag = os.environ.get("VELF_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


NUMBA_ENABLED = False
scatter_add_rows = _scatter_add_rows_numpy
adam_update = _adam_update_numpy

if _numba_wanted():
    try:
        from numba import njit
    except ImportError:
        njit = None
    if njit is not None:
        scatter_add_rows = njit(cache=True)(_scatter_add_rows_loop)
        adam_update = njit(cache=True)(_adam_update_loop)
        NUMBA_ENABLED = True


def backend() -> str:
    """Name of the active kernel backend, 'numba' or 'numpy'."""
    return "numba" if NUMBA_ENABLED else "numpy"
