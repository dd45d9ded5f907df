"""Kernel backend selection.

Hot numeric kernels (rasterization, nearest-neighbour search, z-buffering)
exist in two flavours: numba-jitted loops and vectorized numpy. The backend
is chosen once at import time:

  P2G_BACKEND=numba   use numba kernels (default when numba imports)
  P2G_BACKEND=numpy   force the pure-numpy fallback
  P2G_THREADS=N       upper bound on numba thread count

Both backends compute identical values; `benchmarks/bench_kernels.py`
compares their throughput.
"""

import os

_requested = os.environ.get("P2G_BACKEND", "").strip().lower()

if _requested not in ("", "numba", "numpy"):
    raise ValueError(f"P2G_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numpy":
    NUMBA_ENABLED = False
else:
    try:
        import numba  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:
        if _requested == "numba":
            raise
        NUMBA_ENABLED = False

if NUMBA_ENABLED:
    _threads = os.environ.get("P2G_THREADS", "").strip()
    if _threads:
        import numba

        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
