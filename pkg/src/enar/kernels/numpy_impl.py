"""Pure-numpy pairwise distance sums, chunked to bound peak memory."""

import numpy as np

# broadcast blocks are capped near this many float64 elements
_CHUNK_TARGET = 4_000_000


def _block_rows(m, d):
    return max(1, _CHUNK_TARGET // max(1, m * d))


def cross_alpha_sums(X, Y, alpha):
    """Row and column sums of |x_i - y_j|^alpha over all (i, j) pairs."""
    n, d = X.shape
    m = Y.shape[0]
    row = np.zeros(n)
    col = np.zeros(m)
    block = _block_rows(m, d)
    for s in range(0, n, block):
        diff = X[s:s + block, None, :] - Y[None, :, :]
        dist = ((diff * diff).sum(-1)) ** (0.5 * alpha)
        row[s:s + block] = dist.sum(axis=1)
        col += dist.sum(axis=0)
    return row, col


def within_alpha_sums(X, alpha):
    """row[i] = sum over j != i of |x_i - x_j|^alpha.

    The j == i term is |0|^alpha = 0 for alpha > 0, so summing over all j
    gives the same answer without a mask.
    """
    n, d = X.shape
    row = np.zeros(n)
    block = _block_rows(n, d)
    for s in range(0, n, block):
        diff = X[s:s + block, None, :] - X[None, :, :]
        row[s:s + block] = (((diff * diff).sum(-1)) ** (0.5 * alpha)).sum(axis=1)
    return row
