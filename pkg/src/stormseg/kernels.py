"""Hot convolution kernels.

Each kernel exists twice: a loop nest compiled with numba and a vectorised
numpy version that loops only over kernel taps. The public functions dispatch
on :data:`stormseg._accel.HAVE_NUMBA`; the ``*_numpy`` and ``*_numba`` variants
stay importable so tests and the benchmark can compare them directly.

All arrays are float64 and C-contiguous. Inputs are expected to be already
zero-padded; ``stride`` and ``dilation`` are positive ints.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit


def _tap(offset, stride, n_out):
    return slice(offset, offset + stride * (n_out - 1) + 1, stride)


# ----------------------------------------------------------------------------
# depthwise (channel-wise) convolution: one k x k filter per channel
# ----------------------------------------------------------------------------

def depthwise_forward_numpy(xp, w, stride, dilation, out_h, out_w):
    """``xp``: (N, C, Hp, Wp) padded input, ``w``: (C, k, k)."""
    n, c = xp.shape[:2]
    k = w.shape[1]
    out = np.zeros((n, c, out_h, out_w))
    for a in range(k):
        rows = _tap(a * dilation, stride, out_h)
        for b in range(k):
            cols = _tap(b * dilation, stride, out_w)
            out += w[None, :, a, b, None, None] * xp[:, :, rows, cols]
    return out


def depthwise_backward_numpy(xp, w, g, stride, dilation):
    """Returns (grad wrt padded input, grad wrt w)."""
    k = w.shape[1]
    out_h, out_w = g.shape[2:]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(k):
        rows = _tap(a * dilation, stride, out_h)
        for b in range(k):
            cols = _tap(b * dilation, stride, out_w)
            gxp[:, :, rows, cols] += w[None, :, a, b, None, None] * g
            gw[:, a, b] = np.einsum("nchw,nchw->c", g, xp[:, :, rows, cols])
    return gxp, gw


@njit
def _depthwise_forward_loops(xp, w, stride, dilation, out):
    # tap-outer, row-inner: same per-element summation order as the numpy path
    n_b, n_c, out_h, out_w = out.shape
    k = w.shape[1]
    for n in range(n_b):
        for c in range(n_c):
            for a in range(k):
                for b in range(k):
                    wv = w[c, a, b]
                    for i in range(out_h):
                        r = i * stride + a * dilation
                        for j in range(out_w):
                            out[n, c, i, j] += wv * xp[n, c, r, j * stride + b * dilation]


@njit
def _depthwise_backward_loops(xp, w, g, stride, dilation, gxp, gw):
    n_b, n_c, out_h, out_w = g.shape
    k = w.shape[1]
    for c in range(n_c):
        for a in range(k):
            for b in range(k):
                wv = w[c, a, b]
                acc = 0.0
                for n in range(n_b):
                    for i in range(out_h):
                        r = i * stride + a * dilation
                        for j in range(out_w):
                            s = j * stride + b * dilation
                            gv = g[n, c, i, j]
                            gxp[n, c, r, s] += wv * gv
                            acc += xp[n, c, r, s] * gv
                gw[c, a, b] = acc


def depthwise_forward_numba(xp, w, stride, dilation, out_h, out_w):
    out = np.zeros((xp.shape[0], xp.shape[1], out_h, out_w))
    _depthwise_forward_loops(np.ascontiguousarray(xp), np.ascontiguousarray(w), stride, dilation, out)
    return out


def depthwise_backward_numba(xp, w, g, stride, dilation):
    xp = np.ascontiguousarray(xp)
    gxp = np.zeros_like(xp)
    gw = np.zeros(w.shape)
    _depthwise_backward_loops(xp, np.ascontiguousarray(w), np.ascontiguousarray(g), stride, dilation, gxp, gw)
    return gxp, gw


# ----------------------------------------------------------------------------
# im2col / col2im for dense convolution
# ----------------------------------------------------------------------------

def im2col(xp, k, stride, dilation, out_h, out_w):
    """(N, C, Hp, Wp) -> (N, C, k, k, out_h, out_w) patch tensor."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, out_h, out_w))
    for a in range(k):
        rows = _tap(a * dilation, stride, out_h)
        for b in range(k):
            cols[:, :, a, b] = xp[:, :, rows, _tap(b * dilation, stride, out_w)]
    return cols


def col2im_numpy(cols, padded_shape, stride, dilation):
    """Adjoint of :func:`im2col`: scatter-add patches back into the padded grid."""
    k = cols.shape[2]
    out_h, out_w = cols.shape[4:]
    gxp = np.zeros(padded_shape)
    for a in range(k):
        rows = _tap(a * dilation, stride, out_h)
        for b in range(k):
            gxp[:, :, rows, _tap(b * dilation, stride, out_w)] += cols[:, :, a, b]
    return gxp


@njit
def _col2im_loops(cols, stride, dilation, gxp):
    n_b, n_c, k, _, out_h, out_w = cols.shape
    for n in range(n_b):
        for c in range(n_c):
            for a in range(k):
                for b in range(k):
                    for i in range(out_h):
                        r = i * stride + a * dilation
                        for j in range(out_w):
                            gxp[n, c, r, j * stride + b * dilation] += cols[n, c, a, b, i, j]


def col2im_numba(cols, padded_shape, stride, dilation):
    gxp = np.zeros(padded_shape)
    _col2im_loops(np.ascontiguousarray(cols), stride, dilation, gxp)
    return gxp


if HAVE_NUMBA:
    depthwise_forward = depthwise_forward_numba
    depthwise_backward = depthwise_backward_numba
    col2im = col2im_numba
else:
    depthwise_forward = depthwise_forward_numpy
    depthwise_backward = depthwise_backward_numpy
    col2im = col2im_numpy
