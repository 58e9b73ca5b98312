"""Numba-compiled pairwise distance sums.

Each output element is reduced by one sequential inner loop, so results are
bitwise reproducible regardless of how prange schedules the rows.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def cross_alpha_sums(X, Y, alpha):
    n, d = X.shape
    m = Y.shape[0]
    row = np.zeros(n)
    col = np.zeros(m)
    half = 0.5 * alpha
    for i in prange(n):
        acc = 0.0
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = X[i, k] - Y[j, k]
                s += t * t
            acc += s ** half
        row[i] = acc
    for j in prange(m):
        acc = 0.0
        for i in range(n):
            s = 0.0
            for k in range(d):
                t = X[i, k] - Y[j, k]
                s += t * t
            acc += s ** half
        col[j] = acc
    return row, col


@njit(parallel=True, cache=True)
def within_alpha_sums(X, alpha):
    n, d = X.shape
    row = np.zeros(n)
    half = 0.5 * alpha
    for i in prange(n):
        acc = 0.0
        for j in range(n):
            if j == i:
                continue
            s = 0.0
            for k in range(d):
                t = X[i, k] - X[j, k]
                s += t * t
            acc += s ** half
        row[i] = acc
    return row
