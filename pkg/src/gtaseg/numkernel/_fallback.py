"""Pure numpy implementations of the compiled kernels.

Used when the extension is not built or when ``GTASEG_PURE=1``.
"""

import numpy as np

NLL_CAP = 27.631021115928547


def im2col(x, k):
    """Pixel-major ``x[B,H,W,C]`` -> ``[B*H*W, k*k*C]``, zero same-padding."""
    B, H, W, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.empty((B, H, W, k, k, C), dtype=np.float32)
    for ky in range(k):
        for kx in range(k):
            out[:, :, :, ky, kx] = xp[:, ky:ky + H, kx:kx + W]
    return out.reshape(B * H * W, k * k * C)


def col2im(cols, B, H, W, C, k):
    p = k // 2
    d = cols.reshape(B, H, W, k, k, C)
    out = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=np.float32)
    for ky in range(k):
        for kx in range(k):
            out[:, ky:ky + H, kx:kx + W] += d[:, :, :, ky, kx]
    return np.ascontiguousarray(out[:, p:p + H, p:p + W])


def softmax_ce(logits, labels, weights):
    active = (labels >= 0) & (weights != 0.0)
    lg = logits.astype(np.float64)
    m = lg.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(lg - m).sum(axis=1, keepdims=True))
    safe = np.where(active, labels, 0)
    picked = np.take_along_axis(lg, safe[:, None], axis=1)
    nll = (lse - picked)[:, 0]
    capped = nll >= NLL_CAP
    total = float(np.sum(np.where(active, weights * np.minimum(nll, NLL_CAP), 0.0)))
    live = active & ~capped
    wl = np.where(live, weights, 0.0)[:, None]
    grad = wl * np.exp(lg - lse)
    np.put_along_axis(grad, safe[:, None],
                      np.take_along_axis(grad, safe[:, None], axis=1) - wl, axis=1)
    return total, grad.astype(np.float32)
