# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for same-padded stride-1 convolution (NHWC)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(x, int k):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], h = xv.shape[1], w = xv.shape[2], c = xv.shape[3]
    cdef Py_ssize_t p = k // 2
    out = np.empty((n, h, w, k, k, c))
    cdef double[:, :, :, :, :, ::1] ov = out
    cdef Py_ssize_t b, i, j, di, dj, ch, si, sj
    with nogil:
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    for di in range(k):
                        si = i + di - p
                        for dj in range(k):
                            sj = j + dj - p
                            if si < 0 or si >= h or sj < 0 or sj >= w:
                                for ch in range(c):
                                    ov[b, i, j, di, dj, ch] = 0.0
                            else:
                                for ch in range(c):
                                    ov[b, i, j, di, dj, ch] = xv[b, si, sj, ch]
    return out.reshape(n * h * w, k * k * c)


def col2im(cols, shape, int k):
    cdef Py_ssize_t n = shape[0], h = shape[1], w = shape[2], c = shape[3]
    cdef double[:, :, :, :, :, ::1] cv = np.ascontiguousarray(
        cols, dtype=np.float64).reshape(n, h, w, k, k, c)
    cdef Py_ssize_t p = k // 2
    out = np.zeros((n, h, w, c))
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, i, j, di, dj, ch, ti, tj
    # tap order (di, dj) outermost per sample so every output element sums
    # its contributions in the same order as the numpy fallback
    with nogil:
        for b in range(n):
            for di in range(k):
                for dj in range(k):
                    for i in range(h):
                        ti = i + di - p
                        if ti < 0 or ti >= h:
                            continue
                        for j in range(w):
                            tj = j + dj - p
                            if tj < 0 or tj >= w:
                                continue
                            for ch in range(c):
                                ov[b, ti, tj, ch] += cv[b, i, j, di, dj, ch]
    return out
