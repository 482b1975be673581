"""Doubly-stochastic machinery: Sinkhorn-Knopp balancing and permutation decoding."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.optimize import linear_sum_assignment

from .kernels import FLOOR, sinkhorn_core

__all__ = ["StructurallyInfeasibleError", "sinkhorn_knopp", "decode_permutation"]


class StructurallyInfeasibleError(ValueError):
    """Raised when a matrix has an all-zero row or column and cannot be balanced."""


def sinkhorn_knopp(mat: np.ndarray, tol: float = 1e-8, max_iter: int = 1000) -> np.ndarray:
    """Balance a square non-negative matrix to doubly-stochastic form.

    Rows and columns are normalized alternately; the zero pattern of the input
    is preserved.  Non-convergence within ``max_iter`` raises a warning that
    reports the residual but still returns the last iterate.
    """
    m = np.asarray(mat, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("sinkhorn_knopp needs a square matrix")
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise ValueError("entries must be non-negative and finite")
    if np.any(m.sum(axis=1) == 0) or np.any(m.sum(axis=0) == 0):
        raise StructurallyInfeasibleError("matrix has an all-zero row or column")
    out, _, resid = sinkhorn_core(m, tol, max_iter)
    if resid > tol:
        warnings.warn(
            f"Sinkhorn-Knopp did not converge in {max_iter} iterations "
            f"(residual {resid:.3e})",
            RuntimeWarning,
        )
    return out


def decode_permutation(R: np.ndarray) -> np.ndarray:
    """Bijection row -> column maximizing the product of the chosen entries.

    Solved as an optimal assignment on -log R.  Among equally good assignments
    the lexicographically smallest one (scanning rows in order, preferring low
    column indices) is returned, so full ties decode to the identity.
    """
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    cost = -np.log(np.maximum(R, FLOOR))
    rows, cols = linear_sum_assignment(cost)
    best = cost[rows, cols].sum()

    # Lexicographic tie-break: fix rows one at a time to the smallest column
    # that still admits an optimal completion.
    slack = 1e-9 * max(1.0, abs(best))
    perm = np.full(n, -1, dtype=int)
    used = np.zeros(n, dtype=bool)
    remaining = best
    for i in range(n):
        for j in range(n):
            if used[j]:
                continue
            rest_rows = np.arange(i + 1, n)
            rest_cols = np.flatnonzero(~used & (np.arange(n) != j))
            if len(rest_rows):
                sub = cost[np.ix_(rest_rows, rest_cols)]
                rr, cc = linear_sum_assignment(sub)
                completion = sub[rr, cc].sum()
            else:
                completion = 0.0
            if cost[i, j] + completion <= remaining + slack:
                perm[i] = j
                used[j] = True
                remaining = completion
                break
        if perm[i] < 0:  # numerical fallback: accept the raw optimum for this row
            j = cols[rows == i][0]
            perm[i] = j
            used[j] = True
            remaining -= cost[i, j]
    return perm
