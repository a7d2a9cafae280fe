"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public names (``robust_l1``, ``robust_l1_grad``, ``corner_max``) dispatch
to the numba versions unless ``HOLISTIC_DISABLE_NUMBA`` is set. Both variants
are importable directly so tests and benchmarks can compare them.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "robust_l1",
    "robust_l1_grad",
    "corner_max",
    "robust_l1_numpy",
    "robust_l1_numba",
    "robust_l1_grad_numpy",
    "robust_l1_grad_numba",
    "corner_max_numpy",
    "corner_max_numba",
]


# ---------------------------------------------------------------------------
# L1 distance between every Jacobian row and the label row
#   out[n, k] = sum_m |J[n, k, m] - J[n, y_n, m]|
# ---------------------------------------------------------------------------

def robust_l1_numpy(J, y):
    rows = J[np.arange(J.shape[0]), y]
    return np.abs(J - rows[:, None, :]).sum(axis=-1)


def robust_l1_grad_numpy(J, y, g):
    idx = np.arange(J.shape[0])
    s = np.sign(J - J[idx, y][:, None, :]) * g[:, :, None]
    out = s.copy()
    # the label row receives minus the sum over all k (its own diff is zero)
    out[idx, y] -= s.sum(axis=1)
    return out


@njit
def robust_l1_numba(J, y):
    B, K, M = J.shape
    out = np.zeros((B, K), dtype=J.dtype)
    for n in range(B):
        yn = y[n]
        for k in range(K):
            if k == yn:
                continue
            acc = 0.0
            for m in range(M):
                acc += abs(J[n, k, m] - J[n, yn, m])
            out[n, k] = acc
    return out


@njit
def robust_l1_grad_numba(J, y, g):
    B, K, M = J.shape
    out = np.zeros_like(J)
    for n in range(B):
        yn = y[n]
        lab = out[n, yn]
        for k in range(K):
            if k == yn:
                continue
            gk = g[n, k]
            row = out[n, k]
            for m in range(M):
                d = J[n, k, m] - J[n, yn, m]
                s = gk * ((d > 0) - (d < 0))
                row[m] = s
                lab[m] -= s
    return out


# ---------------------------------------------------------------------------
# Exhaustive maximisation of delta . g over the corners of the l_inf box
# ---------------------------------------------------------------------------

def corner_max_numpy(g, rho, chunk=1 << 14):
    M = g.shape[0]
    bits = np.arange(M)
    best, best_code = -np.inf, 0
    for start in range(0, 1 << M, chunk):
        codes = np.arange(start, min(start + chunk, 1 << M))
        signs = np.where((codes[:, None] >> bits) & 1, 1.0, -1.0)
        vals = rho * (signs @ g)
        i = int(np.argmax(vals))
        if vals[i] > best:
            best, best_code = float(vals[i]), int(codes[i])
    corner = np.where((best_code >> bits) & 1, rho, -rho).astype(np.float64)
    return best, corner


@njit
def _corner_max_numba(g, rho):
    M = g.shape[0]
    best = -np.inf
    best_code = 0
    for code in range(1 << M):
        v = 0.0
        for m in range(M):
            if (code >> m) & 1:
                v += g[m]
            else:
                v -= g[m]
        v *= rho
        if v > best:
            best = v
            best_code = code
    return best, best_code


def corner_max_numba(g, rho):
    best, code = _corner_max_numba(np.ascontiguousarray(g, dtype=np.float64), float(rho))
    bits = np.arange(g.shape[0])
    return float(best), np.where((code >> bits) & 1, rho, -rho).astype(np.float64)


if USE_NUMBA:
    robust_l1 = robust_l1_numba
    robust_l1_grad = robust_l1_grad_numba
    corner_max = corner_max_numba
else:
    robust_l1 = robust_l1_numpy
    robust_l1_grad = robust_l1_grad_numpy
    corner_max = corner_max_numpy
