"""Hot convolution and max-pool loops.

Two implementations of every kernel live here: a numba ``@njit`` version and
a pure-numpy version. The active pair is chosen once at import time; set
``DAGCNN_DISABLE_NUMBA=1`` to force the numpy path (numba missing has the same
effect). Both are importable explicitly as ``NUMBA_KERNELS`` / ``NUMPY_KERNELS``
so tests and the benchmark can compare them.

Layouts: activations are ``(H, W, C)``, conv kernels ``(Kh, Kw, Cin, Cout)``.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda func: func


def _numba_disabled_by_env() -> bool:
    return os.environ.get("DAGCNN_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _conv2d_forward_nb(x, w, b, stride, pad):
    H, W, Cin = x.shape
    Kh, Kw, _, Cout = w.shape
    Ho = (H + 2 * pad - Kh) // stride + 1
    Wo = (W + 2 * pad - Kw) // stride + 1
    out = np.empty((Ho, Wo, Cout))
    for i in range(Ho):
        for j in range(Wo):
            for co in range(Cout):
                out[i, j, co] = b[co]
            for di in range(Kh):
                r = i * stride + di - pad
                if r < 0 or r >= H:
                    continue
                for dj in range(Kw):
                    c = j * stride + dj - pad
                    if c < 0 or c >= W:
                        continue
                    for ci in range(Cin):
                        v = x[r, c, ci]
                        for co in range(Cout):
                            out[i, j, co] += v * w[di, dj, ci, co]
    return out


@njit(cache=True, nogil=True)
def _conv2d_backward_nb(x, w, gout, stride, pad):
    H, W, Cin = x.shape
    Kh, Kw, _, Cout = w.shape
    Ho, Wo, _ = gout.shape
    dx = np.zeros((H, W, Cin))
    dw = np.zeros((Kh, Kw, Cin, Cout))
    db = np.zeros(Cout)
    for i in range(Ho):
        for j in range(Wo):
            for co in range(Cout):
                db[co] += gout[i, j, co]
            for di in range(Kh):
                r = i * stride + di - pad
                if r < 0 or r >= H:
                    continue
                for dj in range(Kw):
                    c = j * stride + dj - pad
                    if c < 0 or c >= W:
                        continue
                    for ci in range(Cin):
                        v = x[r, c, ci]
                        acc = 0.0
                        for co in range(Cout):
                            g = gout[i, j, co]
                            dw[di, dj, ci, co] += v * g
                            acc += w[di, dj, ci, co] * g
                        dx[r, c, ci] += acc
    return dx, dw, db


@njit(cache=True, nogil=True)
def _maxpool_forward_nb(x, window, stride):
    H, W, C = x.shape
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    out = np.empty((Ho, Wo, C))
    arg = np.empty((Ho, Wo, C), dtype=np.int64)
    for i in range(Ho):
        for j in range(Wo):
            for ch in range(C):
                best = x[i * stride, j * stride, ch]
                best_idx = (i * stride) * W + j * stride
                for di in range(window):
                    r = i * stride + di
                    for dj in range(window):
                        c = j * stride + dj
                        v = x[r, c, ch]
                        # strict '>' keeps the lowest flat index on ties
                        if v > best:
                            best = v
                            best_idx = r * W + c
                out[i, j, ch] = best
                arg[i, j, ch] = best_idx
    return out, arg


@njit(cache=True, nogil=True)
def _maxpool_backward_nb(gout, arg, H, W):
    Ho, Wo, C = gout.shape
    dx = np.zeros((H, W, C))
    for i in range(Ho):
        for j in range(Wo):
            for ch in range(C):
                idx = arg[i, j, ch]
                dx[idx // W, idx % W, ch] += gout[i, j, ch]
    return dx


def _conv2d_forward_numba(x, w, b, stride, pad):
    return _conv2d_forward_nb(x, w, b, int(stride), int(pad))


def _conv2d_backward_numba(x, w, gout, stride, pad):
    return _conv2d_backward_nb(x, w, gout, int(stride), int(pad))


def _maxpool_forward_numba(x, window, stride):
    return _maxpool_forward_nb(x, int(window), int(stride))


def _maxpool_backward_numba(gout, arg, in_shape):
    return _maxpool_backward_nb(gout, arg, int(in_shape[0]), int(in_shape[1]))


# ---------------------------------------------------------------------------
# numpy kernels
# ---------------------------------------------------------------------------

def _windows(xp, Kh, Kw, stride):
    # (Ho, Wo, C, Kh, Kw) strided view
    return sliding_window_view(xp, (Kh, Kw), axis=(0, 1))[::stride, ::stride]


def _conv2d_forward_numpy(x, w, b, stride, pad):
    Kh, Kw = w.shape[:2]
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = _windows(xp, Kh, Kw, stride)
    return np.einsum("ijcab,abco->ijo", win, w, optimize=True) + b


def _conv2d_backward_numpy(x, w, gout, stride, pad):
    H, W, _ = x.shape
    Kh, Kw = w.shape[:2]
    Ho, Wo, _ = gout.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = _windows(xp, Kh, Kw, stride)
    dw = np.einsum("ijcab,ijo->abco", win, gout, optimize=True)
    db = gout.sum(axis=(0, 1))
    dxp = np.zeros_like(xp)
    for di in range(Kh):
        for dj in range(Kw):
            rows = slice(di, di + stride * (Ho - 1) + 1, stride)
            cols = slice(dj, dj + stride * (Wo - 1) + 1, stride)
            dxp[rows, cols, :] += gout @ w[di, dj].T
    return dxp[pad:pad + H, pad:pad + W, :], dw, db


def _maxpool_forward_numpy(x, window, stride):
    H, W, C = x.shape
    win = _windows(x, window, window, stride)
    Ho, Wo = win.shape[:2]
    flat = win.reshape(Ho, Wo, C, window * window)
    local = flat.argmax(axis=-1)  # first occurrence == lowest flat input index
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, window)
    rows = np.arange(Ho)[:, None, None] * stride + di
    cols = np.arange(Wo)[None, :, None] * stride + dj
    return out, (rows * W + cols).astype(np.int64)


def _maxpool_backward_numpy(gout, arg, in_shape):
    H, W = int(in_shape[0]), int(in_shape[1])
    C = gout.shape[2]
    dx = np.zeros((H * W, C))
    ch = np.broadcast_to(np.arange(C), gout.shape)
    np.add.at(dx, (arg.ravel(), ch.ravel()), gout.ravel())
    return dx.reshape(H, W, C)


NUMBA_KERNELS = SimpleNamespace(
    name="numba",
    conv2d_forward=_conv2d_forward_numba,
    conv2d_backward=_conv2d_backward_numba,
    maxpool_forward=_maxpool_forward_numba,
    maxpool_backward=_maxpool_backward_numba,
)

NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    conv2d_forward=_conv2d_forward_numpy,
    conv2d_backward=_conv2d_backward_numpy,
    maxpool_forward=_maxpool_forward_numpy,
    maxpool_backward=_maxpool_backward_numpy,
)

USE_NUMBA = NUMBA_AVAILABLE and not _numba_disabled_by_env()
ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS
