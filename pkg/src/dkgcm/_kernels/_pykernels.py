"""Pure numpy fallback for the hot kernels.

The DTW recurrence is evaluated one anti-diagonal at a time so that every
cell on a diagonal, across every requested pair, is updated in one
vectorized step.
"""
import numpy as np


def dtw_batch(a, b, window=-1):
    """DTW cost for each row pair ``(a[p], b[p])``.

    ``a`` is P x t, ``b`` is P x t'. ``window < 0`` disables the band.
    Infeasible pairs come back as ``inf``.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    P, t = a.shape
    _, u = b.shape
    # diagonals of the padded (t+1) x (u+1) table, indexed by row i
    prev2 = np.full((P, t + 1), np.inf)
    prev1 = np.full((P, t + 1), np.inf)
    prev2[:, 0] = 0.0
    rows = np.arange(t + 1)
    for d in range(2, t + u + 1):
        cur = np.full((P, t + 1), np.inf)
        lo = max(1, d - u)
        hi = min(t, d - 1)
        if lo <= hi:
            i = rows[lo:hi + 1]
            j = d - i
            cost = np.abs(a[:, i - 1] - b[:, j - 1])
            best = np.minimum(np.minimum(prev1[:, i - 1], prev1[:, i]), prev2[:, i - 1])
            vals = cost + best
            if window >= 0:
                vals[:, np.abs(i - j) > window] = np.inf
            cur[:, lo:hi + 1] = vals
        prev2, prev1 = prev1, cur
    return prev1[:, t].copy()


def dtw_pair(a, b, window=-1):
    return float(dtw_batch(np.asarray(a, dtype=np.float64)[None, :],
                           np.asarray(b, dtype=np.float64)[None, :], window)[0])


def dtw_columns(x, window=-1, threads=1):
    """Upper-triangle DTW distances between the columns of ``x`` (T x N)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[1]
    iu, ju = np.triu_indices(n, k=1)
    out = np.zeros((n, n))
    if iu.size:
        out[iu, ju] = dtw_batch(x[:, iu].T, x[:, ju].T, window)
    return out


def linear_scan(a, b, reverse=False):
    """h[s] = a[s] * h[s-1] + b[s] along axis 0 with h[-1] = 0.

    With ``reverse`` the recursion runs from the last index down.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    h = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b))
    S = h.shape[0]
    steps = range(S - 1, -1, -1) if reverse else range(S)
    carry = None
    for s in steps:
        carry = b[s] if carry is None else a[s] * carry + b[s]
        h[s] = carry
    return h
