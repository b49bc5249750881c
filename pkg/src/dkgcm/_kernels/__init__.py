"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``DKGCM_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active one.
"""
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _pykernels

_compiled = None
if os.environ.get("DKGCM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    if backend == "python":
        return _pykernels
    raise ValueError(f"unknown backend {backend!r}")


def thread_count():
    """Worker cap from ``DKGCM_THREADS`` (0 or unset means cpu count)."""
    raw = os.environ.get("DKGCM_THREADS", "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError("DKGCM_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def dtw_pair(a, b, window=-1, backend=None):
    return _impl(backend).dtw_pair(a, b, window)


def dtw_upper(x, window=-1, backend=None, threads=None):
    """N x N matrix holding DTW between columns of ``x`` on the strict upper
    triangle and zeros elsewhere. Each unordered pair is computed once."""
    impl = _impl(backend)
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[1]
    iu, ju = np.triu_indices(n, k=1)
    out = np.zeros((n, n))
    if iu.size == 0:
        return out
    threads = thread_count() if threads is None else max(1, threads)
    if impl is _pykernels:
        def run(lo, hi):
            return _pykernels.dtw_batch(x[:, iu[lo:hi]].T, x[:, ju[lo:hi]].T, window)
    else:
        def run(lo, hi):
            return _compiled.dtw_index_pairs(x, iu[lo:hi], ju[lo:hi], window)
    chunks = np.array_split(np.arange(iu.size), min(threads, iu.size))
    bounds = [(c[0], c[-1] + 1) for c in chunks if c.size]
    if len(bounds) == 1:
        parts = [run(*bounds[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(bounds)) as pool:
            parts = list(pool.map(lambda lh: run(*lh), bounds))
    out[iu, ju] = np.concatenate(parts)
    return out


def linear_scan(a, b, reverse=False, backend=None):
    """Scan ``h[s] = a[s] * h[s-1] + b[s]`` along axis 0 (h[-1] = 0)."""
    return _impl(backend).linear_scan(a, b, reverse)
