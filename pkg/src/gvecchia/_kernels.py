"""Compiled loops over column-compressed upper-triangular factors.

Every column stores its strictly-upper row indices in ascending order,
followed by the diagonal as the last entry.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def solve_upper(indptr, indices, data, b):
    """Back substitution for V x = b, ``b`` of shape (n, k)."""
    n = indptr.size - 1
    x = b.copy()
    k = x.shape[1]
    for j in range(n - 1, -1, -1):
        d = data[indptr[j + 1] - 1]
        for r in range(k):
            x[j, r] /= d
        for a in range(indptr[j], indptr[j + 1] - 1):
            i = indices[a]
            v = data[a]
            for r in range(k):
                x[i, r] -= v * x[j, r]
    return x


@njit(cache=True)
def solve_upper_transpose(indptr, indices, data, b):
    """Forward substitution for V' x = b, ``b`` of shape (n, k)."""
    n = indptr.size - 1
    x = b.copy()
    k = x.shape[1]
    for j in range(n):
        for a in range(indptr[j], indptr[j + 1] - 1):
            i = indices[a]
            v = data[a]
            for r in range(k):
                x[j, r] -= v * x[i, r]
        d = data[indptr[j + 1] - 1]
        for r in range(k):
            x[j, r] /= d
    return x


@njit(cache=True)
def _lookup(indptr, indices, sig, col, row):
    lo = indptr[col]
    hi = indptr[col + 1] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if indices[mid] < row:
            lo = mid + 1
        else:
            hi = mid
    if lo < indptr[col + 1] - 1 and indices[lo] == row:
        return sig[lo]
    return 0.0


@njit(cache=True)
def takahashi(indptr, indices, data):
    """Entries of (V V')^{-1} on the stored pattern of V.

    Uses Sigma V = V'^{-1} column by column from the first column on.
    Entries needed by the recursion but absent from the pattern are taken
    as zero, which is exact only when the pattern is closed under fill.
    """
    n = indptr.size - 1
    sig = np.zeros(data.size)
    for j in range(n):
        start = indptr[j]
        end = indptr[j + 1] - 1
        vjj = data[end]
        for a in range(start, end):
            i = indices[a]
            s = 0.0
            for b in range(start, end):
                k = indices[b]
                if i == k:
                    sik = sig[indptr[i + 1] - 1]
                elif i < k:
                    sik = _lookup(indptr, indices, sig, k, i)
                else:
                    sik = _lookup(indptr, indices, sig, i, k)
                s += sik * data[b]
            sig[a] = -s / vjj
        s = 0.0
        for b in range(start, end):
            s += sig[b] * data[b]
        sig[end] = 1.0 / (vjj * vjj) - s / vjj
    return sig


@njit(cache=True)
def cholesky_lower(n, ap, ai, ax, lp, li, rp, ri):
    """Left-looking numeric Cholesky on a precomputed symbolic pattern.

    ``ap/ai/ax``: lower triangle of A (CSC, diagonal first in each column).
    ``lp/li``: pattern of L (CSC, diagonal first, rows ascending).
    ``rp/ri``: row lists of L's strict lower part (for row j, the columns
    k < j with L[j, k] != 0, ascending).

    Returns ``(lx, bad)`` where ``bad`` is -1 on success or the column at
    which a nonpositive pivot was met.
    """
    lx = np.zeros(li.size)
    x = np.zeros(n)
    nxt = lp[:-1].copy() + 1  # next unused off-diagonal slot per column
    for j in range(n):
        for a in range(ap[j], ap[j + 1]):
            x[ai[a]] = ax[a]
        for t in range(rp[j], rp[j + 1]):
            k = ri[t]
            pos = nxt[k]
            ljk = lx[pos]
            for a in range(pos, lp[k + 1]):
                x[li[a]] -= lx[a] * ljk
            nxt[k] = pos + 1
        d = x[j]
        if not d > 0.0:
            return lx, j
        djj = np.sqrt(d)
        lx[lp[j]] = djj
        x[j] = 0.0
        for a in range(lp[j] + 1, lp[j + 1]):
            i = li[a]
            lx[a] = x[i] / djj
            x[i] = 0.0
    return lx, -1
