# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

im2col/col2im loops in C plus BLAS gemm for the contraction.  Output-row
strips bound the im2col buffer so large deployment slices never allocate
more than a few MB.  float32 and float64 supported via a fused type
(float64 is used by the gradient-check builds).
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused floating:
    float
    double

BACKEND_NAME = "cython"

# im2col strip buffer cap, in elements (~64 MB of float64)
cdef Py_ssize_t STRIP_ELEMS = 8388608


cdef inline void _gemm_rm(bint ta, bint tb, int m, int n, int k,
                          floating alpha, floating* a, floating* b,
                          floating beta, floating* c) noexcept nogil:
    """Row-major C(m,n) = alpha*op(A)op(B) + beta*C via the transposed
    column-major problem.  A stored (m,k) rm, or (k,m) when ta; B stored
    (k,n) rm, or (n,k) when tb."""
    cdef char cta, ctb
    cdef int lda, ldb
    if tb:
        cta = b'T'; lda = k
    else:
        cta = b'N'; lda = n
    if ta:
        ctb = b'T'; ldb = m
    else:
        ctb = b'N'; ldb = k
    if floating is float:
        sgemm(&cta, &ctb, &n, &m, &k, &alpha, b, &lda, a, &ldb, &beta, c, &n)
    else:
        dgemm(&cta, &ctb, &n, &m, &k, &alpha, b, &lda, a, &ldb, &beta, c, &n)


cdef void _im2col_strip(floating* x, floating* cols, int ci, int h, int w,
                        int kh, int kw, int stride, int pad,
                        int oy0, int rows, int ow) noexcept nogil:
    """Fill cols (ci*kh*kw, rows*ow) for output rows [oy0, oy0+rows)."""
    cdef int c, i, j, oy, ox, iy, ix
    cdef Py_ssize_t r, base
    cdef floating* dst
    cdef floating* src
    for c in range(ci):
        for i in range(kh):
            for j in range(kw):
                r = (<Py_ssize_t>c * kh + i) * kw + j
                for oy in range(rows):
                    base = (r * rows + oy) * ow
                    dst = cols + base
                    iy = (oy0 + oy) * stride + i - pad
                    if 0 <= iy < h:
                        src = x + (<Py_ssize_t>c * h + iy) * w
                        for ox in range(ow):
                            ix = ox * stride + j - pad
                            if 0 <= ix < w:
                                dst[ox] = src[ix]
                            else:
                                dst[ox] = 0
                    else:
                        for ox in range(ow):
                            dst[ox] = 0


cdef void _col2im_strip_add(floating* cols, floating* gx, int ci, int h, int w,
                            int kh, int kw, int stride, int pad,
                            int oy0, int rows, int ow) noexcept nogil:
    cdef int c, i, j, oy, ox, iy, ix
    cdef Py_ssize_t r, base
    cdef floating* src
    cdef floating* dst
    for c in range(ci):
        for i in range(kh):
            for j in range(kw):
                r = (<Py_ssize_t>c * kh + i) * kw + j
                for oy in range(rows):
                    iy = (oy0 + oy) * stride + i - pad
                    if iy < 0 or iy >= h:
                        continue
                    base = (r * rows + oy) * ow
                    src = cols + base
                    dst = gx + (<Py_ssize_t>c * h + iy) * w
                    for ox in range(ow):
                        ix = ox * stride + j - pad
                        if 0 <= ix < w:
                            dst[ix] += src[ox]


cdef inline int _strip_rows(int K, int ow, int oh):
    cdef Py_ssize_t cap = STRIP_ELEMS // (<Py_ssize_t>K * ow)
    if cap < 1:
        cap = 1
    if cap > oh:
        cap = oh
    return <int>cap


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   floating[::1] b, int stride, int pad):
    cdef int n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int oh = (h + 2 * pad - kh) // stride + 1
    cdef int ow = (wd + 2 * pad - kw) // stride + 1
    cdef int K = ci * kh * kw
    cdef int rows = _strip_rows(K, ow, oh)

    dtype = np.float32 if floating is float else np.float64
    out_np = np.empty((n, co, oh, ow), dtype=dtype)
    cols_np = np.empty((K, rows * ow), dtype=dtype)
    obuf_np = np.empty((co, rows * ow), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_np
    cdef floating[:, ::1] cols = cols_np
    cdef floating[:, ::1] obuf = obuf_np
    cdef int s, oy0, nr, c
    cdef Py_ssize_t l, nl
    cdef floating* po
    cdef floating* pb
    with nogil:
        for s in range(n):
            oy0 = 0
            while oy0 < oh:
                nr = rows if oy0 + rows <= oh else oh - oy0
                nl = <Py_ssize_t>nr * ow
                _im2col_strip(&x[s, 0, 0, 0], &cols[0, 0], ci, h, wd,
                              kh, kw, stride, pad, oy0, nr, ow)
                _gemm_rm[floating](False, False, co, <int>nl, K, <floating>1.0,
                                   &w[0, 0, 0, 0], &cols[0, 0],
                                   <floating>0.0, &obuf[0, 0])
                for c in range(co):
                    po = &out[s, c, oy0, 0]
                    pb = &obuf[c, 0]
                    for l in range(nl):
                        po[l] = pb[l] + b[c]
                oy0 += nr
    return out_np


def conv2d_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                    floating[:, :, :, ::1] grad_out, int stride, int pad):
    cdef int n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int oh = grad_out.shape[2], ow = grad_out.shape[3]
    cdef int K = ci * kh * kw
    cdef int rows = _strip_rows(K, ow, oh)

    dtype = np.float32 if floating is float else np.float64
    gx_np = np.zeros((n, ci, h, wd), dtype=dtype)
    gw_np = np.zeros((co, ci, kh, kw), dtype=dtype)
    gb_np = np.zeros(co, dtype=dtype)
    cols_np = np.empty((K, rows * ow), dtype=dtype)
    gcols_np = np.empty((K, rows * ow), dtype=dtype)
    gout_strip_np = np.empty((co, rows * ow), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_np
    cdef floating[:, :, :, ::1] gw = gw_np
    cdef floating[::1] gb = gb_np
    cdef floating[:, ::1] cols = cols_np
    cdef floating[:, ::1] gcols = gcols_np
    cdef floating[:, ::1] gout_strip = gout_strip_np

    cdef int s, oy0, nr, c
    cdef Py_ssize_t l, nl
    cdef floating* pg
    cdef floating acc
    with nogil:
        for s in range(n):
            oy0 = 0
            while oy0 < oh:
                nr = rows if oy0 + rows <= oh else oh - oy0
                nl = <Py_ssize_t>nr * ow
                for c in range(co):
                    pg = &grad_out[s, c, oy0, 0]
                    acc = 0
                    for l in range(nl):
                        gout_strip[c, l] = pg[l]
                        acc += pg[l]
                    gb[c] += acc
                _im2col_strip(&x[s, 0, 0, 0], &cols[0, 0], ci, h, wd,
                              kh, kw, stride, pad, oy0, nr, ow)
                # gw (co,K) += gout_strip (co,nl) @ cols(K,nl)^T
                _gemm_rm[floating](False, True, co, K, <int>nl, <floating>1.0,
                                   &gout_strip[0, 0], &cols[0, 0],
                                   <floating>1.0, &gw[0, 0, 0, 0])
                # gcols (K,nl) = w(co,K)^T @ gout_strip (co,nl)
                _gemm_rm[floating](True, False, K, <int>nl, co, <floating>1.0,
                                   &w[0, 0, 0, 0], &gout_strip[0, 0],
                                   <floating>0.0, &gcols[0, 0])
                _col2im_strip_add(&gcols[0, 0], &gx[s, 0, 0, 0], ci, h, wd,
                                  kh, kw, stride, pad, oy0, nr, ow)
                oy0 += nr
    return gx_np, gw_np, gb_np


def tconv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                    floating[::1] b):
    """Transposed conv with kernel k == stride k; w is (ci,co,k,k)."""
    cdef int n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int co = w.shape[1], k = w.shape[2]
    cdef int cokk = co * k * k
    cdef Py_ssize_t L = <Py_ssize_t>h * wd

    dtype = np.float32 if floating is float else np.float64
    out_np = np.empty((n, co, k * h, k * wd), dtype=dtype)
    tbuf_np = np.empty((cokk, L), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_np
    cdef floating[:, ::1] tbuf = tbuf_np
    cdef int s, c, u, v, i, j
    cdef Py_ssize_t r
    cdef floating* src
    with nogil:
        for s in range(n):
            # tbuf (co*k*k, L) = w(ci,cokk)^T @ x_mat(ci,L)
            _gemm_rm[floating](True, False, cokk, <int>L, ci, <floating>1.0,
                               &w[0, 0, 0, 0], &x[s, 0, 0, 0],
                               <floating>0.0, &tbuf[0, 0])
            for c in range(co):
                for u in range(k):
                    for v in range(k):
                        r = (<Py_ssize_t>c * k + u) * k + v
                        src = &tbuf[r, 0]
                        for i in range(h):
                            for j in range(wd):
                                out[s, c, i * k + u, j * k + v] = \
                                    src[i * wd + j] + b[c]
    return out_np


def tconv2d_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                     floating[:, :, :, ::1] grad_out):
    cdef int n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef int co = w.shape[1], k = w.shape[2]
    cdef int cokk = co * k * k
    cdef Py_ssize_t L = <Py_ssize_t>h * wd

    dtype = np.float32 if floating is float else np.float64
    gx_np = np.empty((n, ci, h, wd), dtype=dtype)
    gw_np = np.zeros((ci, co, k, k), dtype=dtype)
    gb_np = np.zeros(co, dtype=dtype)
    gt_np = np.empty((cokk, L), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_np
    cdef floating[:, :, :, ::1] gw = gw_np
    cdef floating[::1] gb = gb_np
    cdef floating[:, ::1] gt = gt_np
    cdef int s, c, u, v, i, j
    cdef Py_ssize_t r
    cdef floating* dst
    # bias gradient: plain sum over (n, oh, ow) per channel
    gb_np[:] = np.asarray(grad_out).sum(axis=(0, 2, 3))
    with nogil:
        for s in range(n):
            for c in range(co):
                for u in range(k):
                    for v in range(k):
                        r = (<Py_ssize_t>c * k + u) * k + v
                        dst = &gt[r, 0]
                        for i in range(h):
                            for j in range(wd):
                                dst[i * wd + j] = grad_out[s, c, i * k + u, j * k + v]
            # gw (ci,cokk) += x_mat(ci,L) @ gt(cokk,L)^T
            _gemm_rm[floating](False, True, ci, cokk, <int>L, <floating>1.0,
                               &x[s, 0, 0, 0], &gt[0, 0],
                               <floating>1.0, &gw[0, 0, 0, 0])
            # gx (ci,L) = w(ci,cokk) @ gt(cokk,L)
            _gemm_rm[floating](False, False, ci, <int>L, cokk, <floating>1.0,
                               &w[0, 0, 0, 0], &gt[0, 0],
                               <floating>0.0, &gx[s, 0, 0, 0])
    return gx_np, gw_np, gb_np
