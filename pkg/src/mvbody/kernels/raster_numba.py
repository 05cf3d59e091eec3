"""Numba triangle rasterizer.

Parallelized over image rows: each thread owns whole rows of the z-buffer, so
no write races and bit-deterministic output for any thread count.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def _raster(tri, depth, cover, size):
    T = tri.shape[0]
    for r in prange(size):
        py = r + 0.5
        for t in range(T):
            x0, y0, z0 = tri[t, 0, 0], tri[t, 0, 1], tri[t, 0, 2]
            x1, y1, z1 = tri[t, 1, 0], tri[t, 1, 1], tri[t, 1, 2]
            x2, y2, z2 = tri[t, 2, 0], tri[t, 2, 1], tri[t, 2, 2]
            ymin = min(y0, min(y1, y2))
            ymax = max(y0, max(y1, y2))
            if py < ymin or py > ymax:
                continue
            area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
            if abs(area) < 1e-12:
                continue
            xmin = min(x0, min(x1, x2))
            xmax = max(x0, max(x1, x2))
            c_lo = max(int(np.floor(xmin - 0.5)), 0)
            c_hi = min(int(np.ceil(xmax - 0.5)) + 1, size)
            for c in range(c_lo, c_hi):
                px = c + 0.5
                w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
                w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
                neg = w0 <= 0 and w1 <= 0 and w2 <= 0
                pos = w0 >= 0 and w1 >= 0 and w2 >= 0
                if not (neg or pos):
                    continue
                z = (w0 * z0 + w1 * z1 + w2 * z2) / area
                if z > depth[r, c]:
                    depth[r, c] = z
                cover[r, c] = 1


def rasterize(tri: np.ndarray, size: int):
    """Same contract as raster_numpy.rasterize."""
    tri = np.ascontiguousarray(tri, dtype=np.float64)
    depth = np.full((size, size), -np.inf, dtype=np.float64)
    cover = np.zeros((size, size), dtype=np.uint8)
    if tri.shape[0]:
        _raster(tri, depth, cover, size)
    return depth, cover
