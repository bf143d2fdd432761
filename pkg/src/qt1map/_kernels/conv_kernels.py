"""3x3 same-padding convolution kernels (NCHW layout).

Two flavors: a vectorized numpy path that reduces the convolution to
nine shifted-slice tensordots (BLAS matmuls), and naive numba loops.
Under the ``auto`` backend the numpy path wins — the matmuls dominate
and BLAS beats compiled scalar loops — so ``default_numba=False``.
"""

import numpy as np

from ..backend import maybe_jit, numba_enabled

_jit = maybe_jit(default_numba=False)


def _conv3x3_loop(xpad, w, b, y):
    n, c, hp, wp = xpad.shape
    f = w.shape[0]
    h = hp - 2
    ww = wp - 2
    for i in range(n):
        for o in range(f):
            for r in range(h):
                for s in range(ww):
                    acc = b[o]
                    for ch in range(c):
                        for dy in range(3):
                            for dx in range(3):
                                acc += xpad[i, ch, r + dy, s + dx] * w[o, ch, dy, dx]
                    y[i, o, r, s] = acc
    return y


_conv3x3_loop = _jit(_conv3x3_loop)


def _conv3x3_back_loop(xpad, w, gy, gxpad, gw, gb):
    n, c, hp, wp = xpad.shape
    f = w.shape[0]
    h = hp - 2
    ww = wp - 2
    for i in range(n):
        for o in range(f):
            for r in range(h):
                for s in range(ww):
                    g = gy[i, o, r, s]
                    gb[o] += g
                    for ch in range(c):
                        for dy in range(3):
                            for dx in range(3):
                                gw[o, ch, dy, dx] += xpad[i, ch, r + dy, s + dx] * g
                                gxpad[i, ch, r + dy, s + dx] += w[o, ch, dy, dx] * g
    return gxpad


_conv3x3_back_loop = _jit(_conv3x3_back_loop)


def _pad(x):
    n, c, h, w = x.shape
    xpad = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    xpad[:, :, 1:-1, 1:-1] = x
    return xpad


def _im2col(xpad: np.ndarray, h: int, wd: int) -> np.ndarray:
    """(N, C, h+2, w+2) -> (N*h*w, C*9) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xpad, (3, 3), axis=(2, 3))
    # win: (N, C, h, w, 3, 3) -> (N, h, w, C, 3, 3)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(-1, xpad.shape[1] * 9)


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y[n,f,:,:] = sum_c x[n,c] * w[f,c] (3x3, zero padding) + b[f]."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    n, c, h, wd = x.shape
    f = w.shape[0]
    xpad = _pad(x)
    if numba_enabled(default_numba=False):
        y = np.empty((n, f, h, wd), dtype=np.float64)
        return _conv3x3_loop(xpad, w, b, y)
    # one BLAS matmul: im2col (N*h*w, C*9) x (C*9, F)
    y = _im2col(xpad, h, wd) @ w.reshape(f, c * 9).T + b
    return np.ascontiguousarray(y.reshape(n, h, wd, f).transpose(0, 3, 1, 2))


def conv3x3_backward(
    x: np.ndarray, w: np.ndarray, gy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (gx, gw, gb) of the conv output wrt inputs for upstream gy."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    n, c, h, wd = x.shape
    f = w.shape[0]
    xpad = _pad(x)
    if numba_enabled(default_numba=False):
        gxpad = np.zeros_like(xpad)
        gw = np.zeros_like(w)
        gb = np.zeros(f, dtype=np.float64)
        _conv3x3_back_loop(xpad, w, gy, gxpad, gw, gb)
        return gxpad[:, :, 1:-1, 1:-1].copy(), gw, gb
    gb = gy.sum(axis=(0, 2, 3))
    # gy as (N*h*w, F) against im2col columns (N*h*w, C*9)
    gy_col = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, f)
    gw = (gy_col.T @ _im2col(xpad, h, wd)).reshape(w.shape)
    gcols = (gy_col @ w.reshape(f, c * 9)).reshape(n, h, wd, c, 3, 3)
    gxpad = np.zeros_like(xpad)
    for dy in range(3):
        for dx in range(3):
            gxpad[:, :, dy:dy + h, dx:dx + wd] += gcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
    return gxpad[:, :, 1:-1, 1:-1].copy(), gw, gb
