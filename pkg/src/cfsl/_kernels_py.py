"""Pure-numpy fallback for the convolution kernels.

Must stay bit-identical to ``_kernels.pyx``: im2col is a pure copy and
col2im accumulates the k*k taps in the same (di, dj) order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k):
    """(N, H, W, C) -> (N*H*W, k*k*C) patches, zero padded to keep H, W."""
    n, h, w, c = x.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    xp[:, p:p + h, p:p + w, :] = x
    # windows: (N, H, W, C, k, k) -> reorder to (N, H, W, k, k, C)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * h * w, k * k * c)


def col2im(cols, shape, k):
    """Adjoint of im2col: scatter-add patch gradients back to (N, H, W, C)."""
    n, h, w, c = shape
    p = k // 2
    cols = cols.reshape(n, h, w, k, k, c)
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for di in range(k):
        for dj in range(k):
            xp[:, di:di + h, dj:dj + w, :] += cols[:, :, :, di, dj, :]
    return np.ascontiguousarray(xp[:, p:p + h, p:p + w, :])
