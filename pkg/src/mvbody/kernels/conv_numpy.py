"""3x3 convolution via im2col + BLAS matmul (the default conv backend).

Shapes: x (B, C, H, W), w (O, C, 3, 3), b (O,), stride 1, zero pad 1.
Patches are kept channels-first as (B, C*9, H*W) so both the extraction and
the batched matmul run on contiguous memory with no transposes. The forward
returns the patch matrix as its context; the weight gradient reuses it so
extraction happens once per training step.
"""

import numpy as np


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W), channels-first patch layout."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, C, 3, 3, H, W), dtype=x.dtype)
    for kh in range(3):
        for kw in range(3):
            cols[:, :, kh, kw] = xp[:, :, kh : kh + H, kw : kw + W]
    return cols.reshape(B, C * 9, H * W)


def conv2d_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    B, C, H, W = x.shape
    O = w.shape[0]
    cols = _im2col(x)
    out = np.matmul(w.reshape(O, C * 9), cols)  # (B, O, H*W)
    out += b[:, None]
    return out.reshape(B, O, H, W), cols


def conv2d_bwd_input(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. x by col2im: scatter W^T @ g back through the windows
    (half the memory traffic of building an im2col matrix of g)."""
    O, C = w.shape[:2]
    B, _, H, W = g.shape
    dcols = np.matmul(w.reshape(O, C * 9).T, g.reshape(B, O, H * W))  # (B, C*9, H*W)
    dcols = dcols.reshape(B, C, 3, 3, H, W)
    dxp = np.zeros((B, C, H + 2, W + 2), dtype=g.dtype)
    for kh in range(3):
        for kw in range(3):
            dxp[:, :, kh : kh + H, kw : kw + W] += dcols[:, :, kh, kw]
    return dxp[:, :, 1 : 1 + H, 1 : 1 + W].copy()


def conv2d_bwd_weights(g: np.ndarray, x: np.ndarray, ctx=None) -> np.ndarray:
    B, C, H, W = x.shape
    O = g.shape[1]
    cols = ctx if ctx is not None else _im2col(x)
    gm = np.ascontiguousarray(g.reshape(B, O, H * W).transpose(1, 0, 2)).reshape(O, B * H * W)
    cm = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(C * 9, B * H * W)
    dw = gm @ cm.T  # (O, C*9)
    return dw.reshape(O, C, 3, 3)
