"""Synthetic shape-segmentation task, labeled/unlabeled/held-out splits, and mIoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError

SQUARE, DISK, TRIANGLE = 1, 2, 3
MAX_CLASSES = 4
PIXEL_NOISE = 0.05

# per-class base colour; shapes jitter around it, the background does not
_CLASS_COLOURS = {
    SQUARE: (0.85, 0.35, 0.30),
    DISK: (0.30, 0.75, 0.35),
    TRIANGLE: (0.35, 0.40, 0.85),
}
_COLOUR_JITTER = 0.22
_BRIGHTNESS = (1.0, 1.0)  # per-shape multiplicative shading range
_RADIUS = (0.14, 0.25)  # shape radius as a fraction of image size
_SHAPE_COUNT_P = (0.4, 0.35, 0.25)  # 1..3 shapes


@dataclass
class SegSample:
    image: np.ndarray  # float32 [3,H,W] in [0,1]
    mask: np.ndarray  # uint8 [H,W]
    id: int


@dataclass
class DatasetSplit:
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    heldout: list = field(default_factory=list)
    classes: int = MAX_CLASSES


@dataclass
class IouReport:
    per_class: list  # IoU per class, None where the class is absent from both
    miou: float
    confusion: np.ndarray


def _background(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    # near-grey base with a slight per-channel tint
    base = rng.uniform(0.3, 0.7) + rng.uniform(-0.06, 0.06, size=3)
    img = np.empty((3, H, W))
    for c in range(3):
        tex = np.zeros((H, W))
        for _ in range(3):
            fy, fx = rng.uniform(-0.5, 0.5, size=2)
            tex += np.sin(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
        img[c] = base[c] + 0.08 * tex
    return img


def _shape_mask(kind, cy, cx, r, H, W, angle):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == DISK:
        return dy * dy + dx * dx <= r * r
    if kind == SQUARE:
        ca, sa = np.cos(angle), np.sin(angle)
        u, v = ca * dx + sa * dy, -sa * dx + ca * dy
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    # equilateral triangle inscribed in radius r
    inside = np.ones((H, W), dtype=bool)
    for k in range(3):
        a = angle + 2 * np.pi * k / 3
        inside &= (np.cos(a) * dx + np.sin(a) * dy) <= r * 0.5
    return inside


def _make_sample(seed, idx, K, size):
    rng = np.random.default_rng([seed, idx])
    H = W = size
    img = _background(rng, H, W)
    mask = np.zeros((H, W), dtype=np.uint8)
    n_shapes = 1 + rng.choice(3, p=_SHAPE_COUNT_P)
    for _ in range(n_shapes):
        kind = int(rng.integers(1, K))
        for _attempt in range(20):
            r = rng.uniform(*_RADIUS) * size
            cy, cx = rng.uniform(r, size - r, size=2)
            m = _shape_mask(kind, cy, cx, r, H, W, rng.uniform(0, 2 * np.pi))
            if m.any() and not (mask[m] != 0).any():
                break
        else:
            continue
        shade = rng.uniform(*_BRIGHTNESS)
        colour = shade * np.asarray(_CLASS_COLOURS[kind]) + rng.uniform(-_COLOUR_JITTER, _COLOUR_JITTER, size=3)
        img[:, m] = colour[:, None]
        mask[m] = kind
    img += rng.normal(0.0, PIXEL_NOISE, size=img.shape)
    return SegSample(np.clip(img, 0.0, 1.0).astype(np.float32), mask, idx)


def generate(seed: int, n: int, K: int = MAX_CLASSES, size: int = 32) -> list[SegSample]:
    """``n`` samples, each a pure function of ``(seed, id)``."""
    if K < 2 or n < 1:
        raise DataError(f"need K >= 2 and n >= 1, got K={K}, n={n}")
    if K > MAX_CLASSES:
        raise DataError(f"the shape generator defines {MAX_CLASSES - 1} shape classes; K={K} unsupported")
    return [_make_sample(seed, i, K, size) for i in range(n)]


def split(samples, n_labeled: int, n_heldout: int, seed: int, K: int | None = None) -> DatasetSplit:
    """Deterministic shuffled partition; the labeled part covers every class.

    Stratification swaps in, for each uncovered class, the first unlabeled
    sample containing it (replacing a labeled sample whose removal loses no
    covered class).
    """
    if n_labeled < 1 or n_labeled + n_heldout > len(samples):
        raise DataError(f"cannot take {n_labeled} labeled + {n_heldout} held-out from {len(samples)}")
    if K is None:
        K = 1 + max(int(s.mask.max()) for s in samples)
    order = np.random.default_rng([seed, 0x5EED]).permutation(len(samples))
    shuffled = [samples[i] for i in order]
    heldout = shuffled[:n_heldout]
    pool = shuffled[n_heldout:]
    labeled, unlabeled = pool[:n_labeled], pool[n_labeled:]

    def classes_of(group):
        return set().union(*(set(np.unique(s.mask).tolist()) for s in group)) if group else set()

    for cls in range(K):
        if cls in classes_of(labeled):
            continue
        donor = next((j for j, s in enumerate(unlabeled) if cls in s.mask), None)
        if donor is None:
            raise DataError(f"class {cls} absent from the training pool; cannot stratify")
        for i in range(len(labeled) - 1, -1, -1):
            rest = labeled[:i] + labeled[i + 1:] + [unlabeled[donor]]
            if classes_of(rest) >= classes_of(labeled) | {cls}:
                labeled[i], unlabeled[donor] = unlabeled[donor], labeled[i]
                break
        else:
            raise DataError(f"cannot cover class {cls} with {n_labeled} labeled samples")
    return DatasetSplit(labeled, unlabeled, heldout, K)


def stack(samples):
    """``(images [N,3,H,W] float32, masks [N,H,W] int64)``."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks


def confusion_matrix(pred, gt, K: int) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    idx = gt.astype(np.int64).ravel() * K + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=K * K).reshape(K, K)  # rows gt, cols pred


def miou(pred_masks, gt_masks, K: int) -> IouReport:
    """Aggregate IoU over all images from a single confusion matrix.

    Classes absent from both prediction and ground truth are left out of the mean.
    """
    if len(pred_masks) != len(gt_masks):
        raise DimensionError("prediction and ground-truth counts differ")
    cm = np.zeros((K, K), dtype=np.int64)
    for p, g in zip(pred_masks, gt_masks):
        cm += confusion_matrix(p, g, K)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per_class = [None if union[k] == 0 else float(tp[k] / union[k]) for k in range(K)]
    defined = [v for v in per_class if v is not None]
    return IouReport(per_class, float(np.mean(defined)) if defined else 0.0, cm)
