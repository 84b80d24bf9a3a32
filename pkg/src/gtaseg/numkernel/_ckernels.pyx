# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the conv and cross-entropy hot paths.

Signatures mirror :mod:`gtaseg.numkernel._fallback` exactly; the two are
interchangeable and selected in :mod:`gtaseg.numkernel._backend`.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy

cnp.import_array()

# -log(1e-12): per-pixel loss ceiling from the probability clamp
cdef double NLL_CAP = 27.631021115928547


def im2col(const float[:, :, :, ::1] x, int k):
    """Unfold pixel-major ``x[B,H,W,C]`` into ``[B*H*W, k*k*C]``, zero same-padding.

    Column block ``ky*k + kx`` of a row holds the ``C`` channels of the input
    pixel at offset ``(ky-p, kx-p)``.
    """
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t p = k // 2
    out_arr = np.zeros((B * H * W, k * k * C), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef Py_ssize_t b, y, xx, ky, kx, sy, sx, row
    with nogil:
        for b in range(B):
            for y in range(H):
                for xx in range(W):
                    row = (b * H + y) * W + xx
                    for ky in range(k):
                        sy = y + ky - p
                        if sy < 0 or sy >= H:
                            continue
                        for kx in range(k):
                            sx = xx + kx - p
                            if sx < 0 or sx >= W:
                                continue
                            memcpy(&out[row, (ky * k + kx) * C], &x[b, sy, sx, 0], C * sizeof(float))
    return out_arr


def col2im(const float[:, ::1] cols, int B, int H, int W, int C, int k):
    """Adjoint of :func:`im2col`: scatter-add ``[B*H*W, k*k*C]`` into ``[B,H,W,C]``."""
    cdef Py_ssize_t p = k // 2
    out_arr = np.zeros((B, H, W, C), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, xx, ky, kx, sy, sx, row, c, off
    cdef float* dst
    cdef const float* src
    with nogil:
        for b in range(B):
            for y in range(H):
                for xx in range(W):
                    row = (b * H + y) * W + xx
                    for ky in range(k):
                        sy = y + ky - p
                        if sy < 0 or sy >= H:
                            continue
                        for kx in range(k):
                            sx = xx + kx - p
                            if sx < 0 or sx >= W:
                                continue
                            dst = &out[b, sy, sx, 0]
                            src = &cols[row, (ky * k + kx) * C]
                            for c in range(C):
                                dst[c] += src[c]
    return out_arr


def softmax_ce(const float[:, :, :, ::1] logits, const long[:, :, ::1] labels,
               const double[:, :, ::1] weights):
    """Fused log-softmax cross-entropy.

    Returns ``(weighted_sum, dlogits_unscaled)`` where the gradient holds
    ``w * (softmax - onehot)`` per pixel; the caller applies the reduction scale.
    Pixels whose loss hits the clamp ceiling contribute a constant and no gradient.
    """
    cdef Py_ssize_t B = logits.shape[0], K = logits.shape[1]
    cdef Py_ssize_t H = logits.shape[2], W = logits.shape[3]
    grad_arr = np.zeros((B, K, H, W), dtype=np.float32)
    cdef float[:, :, :, ::1] grad = grad_arr
    cdef Py_ssize_t b, kk, y, xx
    cdef long lab
    cdef double m, z, w, total = 0.0, nll, scale
    cdef double *e = <double *> malloc(K * sizeof(double))
    if e == NULL:
        raise MemoryError()
    with nogil:
        for b in range(B):
            for y in range(H):
                for xx in range(W):
                    lab = labels[b, y, xx]
                    w = weights[b, y, xx]
                    if lab < 0 or w == 0.0:
                        continue
                    m = logits[b, 0, y, xx]
                    for kk in range(1, K):
                        if logits[b, kk, y, xx] > m:
                            m = logits[b, kk, y, xx]
                    z = 0.0
                    for kk in range(K):
                        e[kk] = exp(logits[b, kk, y, xx] - m)
                        z += e[kk]
                    nll = m + log(z) - logits[b, lab, y, xx]
                    if nll >= NLL_CAP:
                        total += w * NLL_CAP
                        continue
                    total += w * nll
                    scale = w / z
                    for kk in range(K):
                        grad[b, kk, y, xx] = <float>(scale * e[kk])
                    grad[b, lab, y, xx] -= <float>w
    free(e)
    return total, grad_arr
