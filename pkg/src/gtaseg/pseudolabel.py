"""Confidence-thresholded pseudo-labels, confidence re-weighting, and the two losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError
from .numkernel import IGNORE, Tensor, weighted_pixel_ce


@dataclass
class PseudoLabelMap:
    labels: np.ndarray  # int64 [B,H,W], IGNORE where dropped
    confidence: np.ndarray  # float32 [B,H,W]
    weights: np.ndarray | None  # float64 [B,H,W], zero where dropped
    gamma: float
    kept_fraction: float
    degenerate: bool = False  # all-equal confidences, kept everything

    @property
    def kept(self):
        return self.labels != IGNORE

    @property
    def n_kept(self):
        return int(self.kept.sum())


@dataclass(frozen=True)
class ReweightConfig:
    enabled: bool = True
    tau: float = 1.0
    quantile: float = 0.2

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if not 0 <= self.quantile < 1:
            raise ValueError("quantile must be in [0, 1)")


def predict_confidence(logits):
    """``(pred, conf)``: argmax class (ties -> smallest index) and max softmax probability."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if z.shape[1] < 2:
        raise ContractError("need at least two classes")
    z = z.astype(np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    pred = p.argmax(axis=1)  # numpy argmax returns the first maximum
    conf = p.max(axis=1).astype(np.float32)
    return pred.astype(np.int64), conf


def compute_threshold(conf, q: float) -> float:
    """Per-batch ``q``-quantile of pixel confidences (linear interpolation).

    ``q == 0`` yields ``-inf`` so every pixel passes the strict ``>`` test.
    """
    c = np.asarray(conf, dtype=np.float64).ravel()
    if c.size == 0:
        raise DataError("cannot threshold an empty confidence collection")
    if not 0 <= q < 1:
        raise ValueError("quantile must be in [0, 1)")
    if q == 0:
        return -math.inf
    return float(np.quantile(c, q, method="linear"))


def generate_pseudo_labels(pred, conf, gamma: float) -> PseudoLabelMap:
    pred = np.asarray(pred, dtype=np.int64)
    conf = np.asarray(conf, dtype=np.float32)
    if pred.shape != conf.shape:
        raise ContractError(f"pred {pred.shape} and conf {conf.shape} differ in shape")
    keep = conf.astype(np.float64) > gamma
    labels = np.where(keep, pred, IGNORE)
    return PseudoLabelMap(labels, conf, None, float(gamma), float(keep.mean()))


def reweight(plmap: PseudoLabelMap, cfg: ReweightConfig) -> PseudoLabelMap:
    """Kept pixels get ``(c + tau) * n_kept / sum_kept(c + tau)``; dropped pixels get 0.

    With ``cfg.enabled`` false every kept pixel gets weight 1.
    """
    kept = plmap.kept
    weights = np.zeros(plmap.labels.shape, dtype=np.float64)
    n = int(kept.sum())
    if n:
        if cfg.enabled:
            s = plmap.confidence[kept].astype(np.float64) + cfg.tau
            denom = s.sum()
            weights[kept] = s * (n / denom) if denom > 0 else 1.0
        else:
            weights[kept] = 1.0
    return PseudoLabelMap(plmap.labels, plmap.confidence, weights, plmap.gamma,
                          plmap.kept_fraction, plmap.degenerate)


def make_pseudo_labels(teacher_logits, cfg: ReweightConfig, fixed_gamma: float | None = None) -> PseudoLabelMap:
    """Threshold, label, and re-weight one unlabeled batch.

    When every confidence is identical the strict rule would keep nothing;
    in that case all pixels are kept and ``degenerate`` is set.
    """
    pred, conf = predict_confidence(teacher_logits)
    gamma = fixed_gamma if fixed_gamma is not None else compute_threshold(conf, cfg.quantile)
    plmap = generate_pseudo_labels(pred, conf, gamma)
    if fixed_gamma is None and plmap.n_kept == 0 and conf.min() == conf.max():
        plmap = generate_pseudo_labels(pred, conf, -math.inf)
        plmap.degenerate = True
    return reweight(plmap, cfg)


def unsupervised_loss(logits, plmap: PseudoLabelMap) -> Tensor:
    if plmap.weights is None:
        raise ContractError("pseudo-label map has no weights; call reweight first")
    return weighted_pixel_ce(logits, plmap.labels, plmap.weights)


def supervised_loss(logits, gt_mask) -> Tensor:
    gt = np.asarray(gt_mask, dtype=np.int64)
    K = logits.shape[1]
    if gt.size and (gt.min() < 0 or gt.max() >= K):
        raise DataError(f"ground-truth class ids must be in [0, {K})")
    return weighted_pixel_ce(logits, gt, np.ones(gt.shape, dtype=np.float64))
