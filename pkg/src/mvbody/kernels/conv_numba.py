"""Numba 3x3 convolution kernels.

Every prange iteration writes a disjoint output slice, so results are
bit-deterministic regardless of thread count.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def _fwd(xp, w, b, out):
    B, O, H, W = out.shape
    C = xp.shape[1]
    for bi in prange(B):
        for o in range(O):
            for h in range(H):
                for x_ in range(W):
                    out[bi, o, h, x_] = b[o]
            for c in range(C):
                for kh in range(3):
                    for kw in range(3):
                        wv = w[o, c, kh, kw]
                        for h in range(H):
                            for x_ in range(W):
                                out[bi, o, h, x_] += wv * xp[bi, c, h + kh, x_ + kw]


@njit(parallel=True, fastmath=True, cache=True)
def _bwd_weights(g, xp, dw):
    B, O, H, W = g.shape
    C = xp.shape[1]
    for o in prange(O):
        for c in range(C):
            for kh in range(3):
                for kw in range(3):
                    acc = 0.0
                    for bi in range(B):
                        for h in range(H):
                            for x_ in range(W):
                                acc += g[bi, o, h, x_] * xp[bi, c, h + kh, x_ + kw]
                    dw[o, c, kh, kw] = acc


def conv2d_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.empty((B, w.shape[0], H, W), dtype=x.dtype)
    _fwd(xp, w, b, out)
    return out, None


def conv2d_bwd_input(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    # dx is a correlation of g with the flipped kernel, channels swapped:
    # reuse the forward kernel with w' [c, o, kh, kw] = w[o, c, 2-kh, 2-kw].
    B, O, H, W = g.shape  # noqa: F841
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dx = np.empty((B, w.shape[1], H, W), dtype=g.dtype)
    zero_bias = np.zeros(w.shape[1], dtype=g.dtype)
    _fwd(gp, wf, zero_bias, dx)
    return dx


def conv2d_bwd_weights(g: np.ndarray, x: np.ndarray, ctx=None) -> np.ndarray:
    O, C = g.shape[1], x.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dw = np.empty((O, C, 3, 3), dtype=g.dtype)
    _bwd_weights(np.ascontiguousarray(g), xp, dw)
    return dw
