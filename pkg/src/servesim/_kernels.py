"""Token-matching kernels: numba fast path with a pure-numpy fallback.

Prefix matching over token arrays is the one numeric inner loop that runs
on every cache lookup and every routing decision, so it gets a compiled
kernel.  Set ``SERVESIM_PURE_NUMPY=1`` to force the numpy implementations
(the benchmark in ``benchmarks/bench_kernels.py`` compares both paths).
"""

import os

import numpy as np

TOKEN_DTYPE = np.int64


def as_tokens(seq) -> np.ndarray:
    """Coerce a token sequence to the canonical contiguous int64 array."""
    arr = np.ascontiguousarray(seq, dtype=TOKEN_DTYPE)
    if arr.ndim != 1:
        raise ValueError("token sequences must be one-dimensional")
    return arr


def _common_prefix_len_np(a: np.ndarray, b: np.ndarray) -> int:
    n = min(a.shape[0], b.shape[0])
    if n == 0:
        return 0
    neq = a[:n] != b[:n]
    first = int(np.argmax(neq))
    return first if neq[first] else n


_FORCE_NUMPY = os.environ.get("SERVESIM_PURE_NUMPY", "") not in ("", "0")
NUMBA_ENABLED = False

if not _FORCE_NUMPY:
    try:
        from numba import njit

        @njit("int64(int64[::1], int64[::1])", cache=True, nogil=True)
        def _common_prefix_len_nb(a, b):  # pragma: no cover - compiled
            n = min(a.shape[0], b.shape[0])
            for i in range(n):
                if a[i] != b[i]:
                    return i
            return n

        NUMBA_ENABLED = True
    except ImportError:
        pass

if NUMBA_ENABLED:
    common_prefix_len = _common_prefix_len_nb
else:
    common_prefix_len = _common_prefix_len_np


def block_prefix_len(a: np.ndarray, b: np.ndarray, block_size: int) -> int:
    """Common prefix length truncated down to a whole number of blocks."""
    return (int(common_prefix_len(a, b)) // block_size) * block_size
