"""Pure-numpy convolution kernels.

Fallback backend used when the compiled extension (``lsnet._kernels``) is not
available or is disabled via ``LSNET_PURE_PYTHON=1``.  Same call signatures,
same results up to floating-point summation order.

All functions assume validated, C-contiguous inputs of a common float dtype;
argument checking lives in :mod:`lsnet.ops`.
"""

import numpy as np

BACKEND_NAME = "numpy"


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x_pad, kh, kw, stride, oh, ow):
    # Read-only sliding-window view (n, ci, oh, ow, kh, kw).
    n, ci = x_pad.shape[:2]
    sn, sc, sh, sw = x_pad.strides
    return np.lib.stride_tricks.as_strided(
        x_pad,
        (n, ci, oh, ow, kh, kw),
        (sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )


def conv2d_forward(x, w, b, stride, pad):
    """Cross-correlation of (n,ci,h,w) with (co,ci,kh,kw) plus bias."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    win = _windows(_pad_hw(x, pad), kh, kw, stride, oh, ow)
    # tensordot lowers to one BLAS gemm on the materialized im2col buffer
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (n,oh,ow,co)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += b[None, :, None, None]
    return out


def conv2d_backward(x, w, grad_out, stride, pad):
    """Gradients of conv2d_forward w.r.t. input, weight, and bias."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh, ow = grad_out.shape[2:]

    grad_b = grad_out.sum(axis=(0, 2, 3))

    x_pad = _pad_hw(x, pad)
    win = _windows(x_pad, kh, kw, stride, oh, ow)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))

    # Scatter col-gradients back; one slice-add per kernel tap.
    grad_cols = np.tensordot(grad_out, w, axes=([1], [0]))  # (n,oh,ow,ci,kh,kw)
    grad_cols = grad_cols.transpose(0, 3, 1, 2, 4, 5)  # (n,ci,oh,ow,kh,kw)
    grad_xp = np.zeros_like(x_pad)
    for i in range(kh):
        hi = i + stride * oh
        for j in range(kw):
            wj = j + stride * ow
            grad_xp[:, :, i:hi:stride, j:wj:stride] += grad_cols[:, :, :, :, i, j]
    if pad:
        grad_x = grad_xp[:, :, pad:pad + h, pad:pad + wd]
    else:
        grad_x = grad_xp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def tconv2d_forward(x, w, b):
    """Transposed convolution, kernel k == stride k (disjoint output blocks).

    x: (n,ci,h,w), w: (ci,co,k,k) -> (n,co,k*h,k*w)
    """
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    t = np.tensordot(x, w, axes=([1], [0]))  # (n,h,w,co,k,k)
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, co, k * h, k * wd)
    out = np.ascontiguousarray(out)
    out += b[None, :, None, None]
    return out


def tconv2d_backward(x, w, grad_out):
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    grad_b = grad_out.sum(axis=(0, 2, 3))
    # (n,co,h,k,w,k) gathered view of the disjoint output blocks
    g = grad_out.reshape(n, co, h, k, wd, k)
    grad_w = np.tensordot(x, g.transpose(0, 2, 4, 1, 3, 5), axes=([0, 2, 3], [0, 1, 2]))
    grad_x = np.tensordot(g, w, axes=([1, 3, 5], [1, 2, 3]))  # (n,h,w,ci)
    return np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2)), grad_w, grad_b
