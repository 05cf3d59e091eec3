"""Pure-numpy triangle rasterizer (per-triangle bounding-box loop)."""

import numpy as np


def rasterize(tri: np.ndarray, size: int):
    """Rasterize triangles given in pixel coordinates.

    tri: (T, 3, 3) float array; each vertex is (u, v, z) with u the column
    coordinate, v the row coordinate and z the camera-axis value (larger is
    closer to the camera). Pixel (r, c) is covered when its center
    (c + 0.5, r + 0.5) lies inside a triangle; the z-buffer keeps the largest
    interpolated z. Returns (depth (S, S) float64 with -inf background,
    cover (S, S) uint8).
    """
    tri = np.asarray(tri, dtype=np.float64)
    depth = np.full((size, size), -np.inf, dtype=np.float64)
    cover = np.zeros((size, size), dtype=np.uint8)
    flat = depth.ravel()
    for t in range(tri.shape[0]):
        (x0, y0, z0), (x1, y1, z1), (x2, y2, z2) = tri[t]
        c_lo = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        c_hi = min(int(np.ceil(max(x0, x1, x2) - 0.5)) + 1, size)
        r_lo = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        r_hi = min(int(np.ceil(max(y0, y1, y2) - 0.5)) + 1, size)
        if c_lo >= c_hi or r_lo >= r_hi:
            continue
        px = np.arange(c_lo, c_hi, dtype=np.float64) + 0.5
        py = np.arange(r_lo, r_hi, dtype=np.float64) + 0.5
        PX, PY = np.meshgrid(px, py)
        w0 = (x2 - x1) * (PY - y1) - (y2 - y1) * (PX - x1)
        w1 = (x0 - x2) * (PY - y2) - (y0 - y2) * (PX - x2)
        w2 = (x1 - x0) * (PY - y0) - (y1 - y0) * (PX - x0)
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(area) < 1e-12:
            continue
        inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
        if not inside.any():
            continue
        z = (w0 * z0 + w1 * z1 + w2 * z2) / area
        rows, cols = np.nonzero(inside)
        idx = (rows + r_lo) * size + (cols + c_lo)
        np.maximum.at(flat, idx, z[rows, cols])
        cover.ravel()[idx] = 1
    return depth, cover
