"""Kernel backend selection.

Hot numeric loops (3x3 convolution, triangle rasterization) have two
implementations: numba @njit kernels and pure-numpy fallbacks. The numba path
is the default whenever numba imports; set MVBODY_NO_NUMBA=1 to force the
numpy path (useful on machines where JIT compilation is unwanted, and for the
benchmark in benchmarks/bench_kernels.py).
"""

import os


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except Exception:
        return False
    return True


def numba_disabled_by_env() -> bool:
    return os.environ.get("MVBODY_NO_NUMBA", "").strip().lower() in {"1", "true", "yes"}


USE_NUMBA: bool = _numba_available() and not numba_disabled_by_env()


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return "numba" if USE_NUMBA else "numpy"
