"""Mask- and box-level evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError
from .geometry import Box3


def threshold_heatmap(scores: np.ndarray, thresh: float = 0.5) -> np.ndarray:
    return np.asarray(scores) >= thresh


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); defined as 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise InvalidParameterError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a = int(pred.sum())
    b = int(gt.sum())
    if a + b == 0:
        return 1.0
    inter = int(np.count_nonzero(pred & gt))
    return 2.0 * inter / (a + b)


def mask_centroid_px(mask: np.ndarray):
    """Centroid of true pixels in continuous detector coordinates, or None."""
    idx = np.argwhere(mask)
    if idx.size == 0:
        return None
    rc = idx.mean(axis=0) + 0.5
    return np.array([rc[1], rc[0]])  # (u, v)


def centroid_error_2d(pred_scores: np.ndarray, gt_mask: np.ndarray,
                      pitch_mm: float, thresh: float = 0.5):
    """Distance between mask centroids in mm; None when either mask is empty."""
    pred_mask = threshold_heatmap(pred_scores, thresh)
    if pred_mask.shape != np.asarray(gt_mask).shape:
        raise InvalidParameterError("prediction and ground truth shapes differ")
    a = mask_centroid_px(pred_mask)
    b = mask_centroid_px(gt_mask)
    if a is None or b is None:
        return None
    return float(np.linalg.norm(a - b) * pitch_mm)


def bbox_pr(pred: Box3, gt: Box3):
    """(precision, recall) of two boxes; precision is None for a flat pred."""
    inter = pred.intersect(gt)
    vol_i = inter.volume() if inter is not None else 0.0
    vp = pred.volume()
    vg = gt.volume()
    precision = None if vp <= 0 else vol_i / vp
    recall = None if vg <= 0 else vol_i / vg
    return precision, recall


def mean_sd(values) -> tuple[float, float]:
    """Sample mean and sd (ddof=1; sd 0 for a single sample)."""
    arr = np.asarray([v for v in values], dtype=float)
    if arr.size == 0:
        raise InvalidParameterError("cannot aggregate zero samples")
    m = float(arr.mean())
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return m, sd


@dataclass(frozen=True)
class MetricRow:
    """Per-prompt aggregate mirroring the reported table columns.

    Fields that a given study does not produce stay None. n_undefined counts
    samples excluded because a prediction (or its metric) was undefined.
    """

    prompt: str
    n_samples: int
    n_undefined: int = 0
    dice: tuple[float, float] | None = None
    centroid2d_mm: tuple[float, float] | None = None
    centroid3d_mm: tuple[float, float] | None = None
    bbox_precision: tuple[float, float] | None = None
    bbox_recall: tuple[float, float] | None = None

    def __post_init__(self):
        for name in ("dice", "bbox_precision", "bbox_recall"):
            stat = getattr(self, name)
            if stat is not None:
                m, sd = stat
                if not (0.0 <= m <= 1.0) or sd < 0 or not np.isfinite(m):
                    raise InvalidParameterError(f"{name} out of range: {stat}")
        for name in ("centroid2d_mm", "centroid3d_mm"):
            stat = getattr(self, name)
            if stat is not None:
                m, sd = stat
                if not np.isfinite(m) or sd < 0:
                    raise InvalidParameterError(f"{name} invalid: {stat}")
