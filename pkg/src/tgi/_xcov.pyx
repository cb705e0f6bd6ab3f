# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled shift-window cross-covariance kernel."""
import numpy as np


def xcov_window(const double[:, ::1] sig, const double[:, ::1] idl,
                int dy_min, int dy_max, int dx_min, int dx_max):
    """out[dy - dy_min, dx - dx_min] = sum_{y,x} sig[y+dy, x+dx] * idl[y, x]

    over the pixels where both images overlap. Rows of ``idl`` are visited
    once and reused for every shift while they sit in cache.
    """
    cdef Py_ssize_t h = sig.shape[0], w = sig.shape[1]
    cdef Py_ssize_t ny = dy_max - dy_min + 1, nx = dx_max - dx_min + 1
    out_arr = np.zeros((ny, nx), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t y, ys, k, n, x0, x1
    cdef int dy, dx
    cdef double acc
    cdef const double* ps
    cdef const double* pi
    with nogil:
        for y in range(h):
            for dy in range(dy_min, dy_max + 1):
                ys = y + dy
                if ys < 0 or ys >= h:
                    continue
                for dx in range(dx_min, dx_max + 1):
                    x0 = -dx if dx < 0 else 0
                    x1 = w - dx if dx > 0 else w
                    n = x1 - x0
                    if n <= 0:
                        continue
                    ps = &sig[ys, x0 + dx]
                    pi = &idl[y, x0]
                    acc = 0.0
                    for k in range(n):
                        acc = acc + ps[k] * pi[k]
                    out[dy - dy_min, dx - dx_min] += acc
    return out_arr
