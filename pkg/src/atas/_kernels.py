"""Compiled loops for the memory-bound conv/pool plumbing.

All arrays are channel-major (C, B, H, W) and float64.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def im2col(x, kh, kw, stride, pad):
    C, B, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = np.empty((C, kh, kw, B, Ho, Wo))
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                for b in range(B):
                    for r in range(Ho):
                        src = r * stride + i - pad
                        if src < 0 or src >= H:
                            for q in range(Wo):
                                cols[c, i, j, b, r, q] = 0.0
                            continue
                        for q in range(Wo):
                            sc = q * stride + j - pad
                            if sc < 0 or sc >= W:
                                cols[c, i, j, b, r, q] = 0.0
                            else:
                                cols[c, i, j, b, r, q] = x[c, b, src, sc]
    return cols


@numba.njit(cache=True)
def col2im(gcols, H, W, stride, pad):
    C, kh, kw, B, Ho, Wo = gcols.shape
    gx = np.zeros((C, B, H, W))
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                for b in range(B):
                    for r in range(Ho):
                        src = r * stride + i - pad
                        if src < 0 or src >= H:
                            continue
                        for q in range(Wo):
                            sc = q * stride + j - pad
                            if 0 <= sc < W:
                                gx[c, b, src, sc] += gcols[c, i, j, b, r, q]
    return gx


@numba.njit(cache=True)
def maxpool_fwd(x):
    A, B, H, W = x.shape
    out = np.empty((A, B, H // 2, W // 2))
    idx = np.empty((A, B, H // 2, W // 2), np.uint8)
    for a in range(A):
        for b in range(B):
            for i in range(H // 2):
                for j in range(W // 2):
                    # strict > keeps the first maximum in row-major window order
                    m = x[a, b, 2 * i, 2 * j]
                    k = 0
                    v = x[a, b, 2 * i, 2 * j + 1]
                    if v > m:
                        m = v
                        k = 1
                    v = x[a, b, 2 * i + 1, 2 * j]
                    if v > m:
                        m = v
                        k = 2
                    v = x[a, b, 2 * i + 1, 2 * j + 1]
                    if v > m:
                        m = v
                        k = 3
                    out[a, b, i, j] = m
                    idx[a, b, i, j] = k
    return out, idx


@numba.njit(cache=True)
def maxpool_bwd(g, idx):
    A, B, H2, W2 = g.shape
    gx = np.zeros((A, B, 2 * H2, 2 * W2))
    for a in range(A):
        for b in range(B):
            for i in range(H2):
                for j in range(W2):
                    k = idx[a, b, i, j]
                    gx[a, b, 2 * i + k // 2, 2 * j + k % 2] = g[a, b, i, j]
    return gx


def _tune_malloc():
    # Large temporaries are otherwise mmap'd and page-faulted on every call.
    import ctypes
    import ctypes.util
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        M_TRIM_THRESHOLD, M_TOP_PAD, M_MMAP_THRESHOLD = -1, -2, -3
        libc.mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024)
        libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
        libc.mallopt(M_TOP_PAD, 256 * 1024 * 1024)
    except (OSError, AttributeError):
        pass


_tune_malloc()
