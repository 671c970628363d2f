"""Exact minimum-cost assignment (Hungarian method with potentials, O(n^3))."""
from __future__ import annotations

import numpy as np


def linear_sum_assignment(cost) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost matching on a rectangular cost matrix.

    Returns ``(rows, cols)`` index arrays of length ``min(n_rows, n_cols)``,
    sorted by row, like :func:`scipy.optimize.linear_sum_assignment`.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    n_rows, n_cols = C.shape
    if n_rows == 0 or n_cols == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    transposed = n_rows > n_cols
    if transposed:
        C = C.T
        n_rows, n_cols = n_cols, n_rows
    # pad with zero-cost dummy rows to a square problem
    n = n_cols
    A = np.zeros((n, n))
    A[:n_rows] = C

    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=int)  # match[j] = row (1-based) owning column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = np.inf, 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = A[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    row_to_col = np.full(n, -1)
    for j in range(1, n + 1):
        row_to_col[match[j] - 1] = j - 1
    rows = np.arange(n_rows)
    cols = row_to_col[:n_rows]
    if transposed:
        order = np.argsort(cols)
        return cols[order], rows[order]
    return rows, cols
