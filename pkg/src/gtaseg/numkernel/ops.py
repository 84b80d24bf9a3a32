"""Differentiable primitives. Every op accepts untaped tensors too, in which
case it only computes the forward value."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DimensionError
from . import _backend
from .autodiff import Tensor, tape_of

IGNORE = -1


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def conv2d(x, kernel, bias, layout: str = "BCHW") -> Tensor:
    """Stride-1 convolution with zero same-padding; ``k`` must be odd.

    ``layout="BHWC"`` takes and returns pixel-major activations, which the
    model uses internally: the unfolded patches then feed the GEMM without
    any transposes.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if layout == "BCHW":
        xh = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    elif layout == "BHWC":
        xh = x.data
    else:
        raise ValueError(f"unknown layout {layout!r}")
    B, H, W, Cin = xh.shape
    Cout, Ck, k, k2 = kernel.shape
    if Ck != Cin:
        raise DimensionError(f"input has {Cin} channels but kernel expects {Ck}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {k}x{k2}")
    if bias.shape != (Cout,):
        raise DimensionError(f"bias shape {bias.shape} does not match {Cout} output channels")

    cols = _backend.im2col(xh, k)  # [B*H*W, k*k*Cin]
    wmat = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0)).reshape(k * k * Cin, Cout)
    out = cols @ wmat
    out += bias.data
    value = out.reshape(B, H, W, Cout)
    if layout == "BCHW":
        value = value.transpose(0, 3, 1, 2)

    tape = tape_of(x, kernel, bias)
    if tape is None:
        return Tensor(value)

    def vjp(g):
        gh = g.transpose(0, 2, 3, 1) if layout == "BCHW" else g
        gr = np.ascontiguousarray(gh).reshape(B * H * W, Cout)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _backend.col2im(gr @ wmat.T, B, H, W, Cin, k)
            if layout == "BCHW":
                gx = gx.transpose(0, 3, 1, 2)
        if kernel.requires_grad:
            gw = (cols.T @ gr).reshape(k, k, Cin, Cout).transpose(3, 2, 0, 1)
        if bias.requires_grad:
            gb = gr.sum(axis=0, dtype=np.float64).astype(np.float32)
        return gx, gw, gb

    return tape.record(value, (x, kernel, bias), vjp)


def relu(x) -> Tensor:
    """``max(x, 0)``; the subgradient at 0 is 0."""
    x = _as_tensor(x)
    value = np.maximum(x.data, np.float32(0))
    if x.tape is None:
        return Tensor(value)
    mask = x.data > 0
    return x.tape.record(value, (x,), lambda g: (g * mask,))


def channels_first(x) -> Tensor:
    """``[B,H,W,C]`` -> ``[B,C,H,W]``."""
    x = _as_tensor(x)
    value = x.data.transpose(0, 3, 1, 2)
    if x.tape is None:
        return Tensor(value)
    return x.tape.record(value, (x,), lambda g: (g.transpose(0, 2, 3, 1),))


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channel(logits) -> Tensor:
    """Softmax over axis 1 of a ``[B,K,H,W]`` tensor (max-subtracted)."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 4 or logits.shape[1] < 2:
        raise DimensionError(f"softmax_channel expects [B,K>=2,H,W], got {logits.shape}")
    p64 = _softmax(logits.data.astype(np.float64))
    value = p64.astype(np.float32)
    if logits.tape is None:
        return Tensor(value)

    def vjp(g):
        dot = (g * p64).sum(axis=1, keepdims=True)
        return ((p64 * (g - dot)).astype(np.float32),)

    return logits.tape.record(value, (logits,), vjp)


def tensor_sum(x, coef=None) -> Tensor:
    """Scalar ``sum(coef * x)`` (``coef`` defaults to ones), 64-bit accumulated."""
    x = _as_tensor(x)
    c = None if coef is None else np.asarray(coef, dtype=np.float32)
    total = x.data.sum(dtype=np.float64) if c is None else (x.data.astype(np.float64) * c).sum()
    value = np.array(total, dtype=np.float32)
    if x.tape is None:
        return Tensor(value)

    def vjp(g):
        scale = g.reshape(())
        base = np.ones_like(x.data) if c is None else np.broadcast_to(c, x.shape)
        return ((base * scale).astype(np.float32),)

    return x.tape.record(value, (x,), vjp)


def weighted_pixel_ce(logits, labels, weights) -> Tensor:
    """``sum_kept(w * -log softmax(logits)[label]) / max(1, n_kept)``.

    Fused log-softmax cross-entropy over ``[B,K,H,W]`` logits; ``labels`` holds
    class ids or ``IGNORE``. Weights are treated as constants.
    """
    logits = _as_tensor(logits)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    B, K, H, W = logits.shape
    if labels.shape != (B, H, W) or weights.shape != (B, H, W):
        raise DimensionError(f"labels/weights must be {(B, H, W)}, got {labels.shape} and {weights.shape}")
    ignored = labels == IGNORE
    if np.any(weights[ignored] != 0):
        raise ContractError("nonzero weight on an IGNORE pixel")
    if np.any(labels >= K) or np.any(labels < IGNORE):
        raise ContractError(f"label ids must be in [0, {K}) or IGNORE")
    n_kept = int((~ignored).sum())
    scale = 1.0 / max(1, n_kept)
    total, grad = _backend.softmax_ce(logits.data, labels, weights)
    value = np.array(total * scale, dtype=np.float32)
    if logits.tape is None:
        return Tensor(value)

    def vjp(g):
        return (grad * np.float32(scale * float(g.reshape(()))),)

    return logits.tape.record(value, (logits,), vjp)


def add(a, b) -> Tensor:
    """Elementwise ``a + b`` for same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    tape = tape_of(a, b)
    value = a.data + b.data
    if tape is None:
        return Tensor(value)
    return tape.record(value, (a, b), lambda g: (g, g))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c32 = np.float32(c)
    value = a.data * c32
    if a.tape is None:
        return Tensor(value)
    return a.tape.record(value, (a,), lambda g: (g * c32,))
