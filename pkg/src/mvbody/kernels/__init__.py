"""Hot numeric kernels with backend dispatch.

Two kernel families, each with a numba @njit implementation and a pure
numpy fallback (exercised by tests and benchmarks/bench_kernels.py):

- rasterize: per-pixel triangle loops; numba wins by a wide margin and is the
  default. MVBODY_NO_NUMBA=1 selects the numpy fallback.
- conv2d: the numpy path lowers to im2col + BLAS matmul, which on typical
  hosts beats a direct numba loop nest at this model's shapes (short channel
  and spatial extents defeat SIMD), so numpy is the conv default.
  MVBODY_CONV=numba opts into the direct kernels; the benchmark compares both.

conv2d_fwd returns (out, ctx); ctx carries backend state (the im2col matrix)
that conv2d_bwd_weights reuses so the patch extraction runs once per step.
"""

import os

from ..backend import USE_NUMBA

_conv_choice = os.environ.get("MVBODY_CONV", "numpy").strip().lower()

if USE_NUMBA:
    from .raster_numba import rasterize
else:
    from .raster_numpy import rasterize

if USE_NUMBA and _conv_choice == "numba":
    from .conv_numba import conv2d_bwd_input, conv2d_bwd_weights, conv2d_fwd
else:
    from .conv_numpy import conv2d_bwd_input, conv2d_bwd_weights, conv2d_fwd

__all__ = ["conv2d_fwd", "conv2d_bwd_input", "conv2d_bwd_weights", "rasterize"]
