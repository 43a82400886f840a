"""Image- and pixel-level detection metrics."""

from typing import List, Sequence, Tuple

import numpy as np
from skimage.measure import label as label_regions
from sklearn.metrics import auc, average_precision_score, roc_auc_score

from .exceptions import MetricUndefinedError, ShapeMismatchError


def _as_flat(scores, labels, metric: str) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeMismatchError(
            f"{metric}: scores and labels differ in size",
            expected=labels.shape,
            actual=scores.shape,
        )
    if scores.size == 0:
        raise MetricUndefinedError(metric, "no samples")
    return scores, labels


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve; ties count one half.

    Raises:
        MetricUndefinedError: Only one class present
    """
    scores, labels = _as_flat(scores, labels, "AUROC")
    if labels.all() or not labels.any():
        raise MetricUndefinedError("AUROC", "labels contain a single class")
    return float(roc_auc_score(labels, scores))


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-integrated area under the precision-recall curve.

    Raises:
        MetricUndefinedError: No positive labels
    """
    scores, labels = _as_flat(scores, labels, "AP")
    if not labels.any():
        raise MetricUndefinedError("AP", "no positive labels")
    return float(average_precision_score(labels, scores))


def _regions(masks: np.ndarray) -> List[np.ndarray]:
    """Flat pixel indices of every 8-connected region, image by image."""
    regions = []
    offset = 0
    for mask in masks:
        labelled = label_regions(mask, connectivity=2)
        flat = labelled.ravel()
        for region_id in range(1, int(labelled.max()) + 1):
            regions.append(np.flatnonzero(flat == region_id) + offset)
        offset += mask.size
    return regions


def count_regions(gt_masks: Sequence[np.ndarray]) -> int:
    """Number of 8-connected ground-truth regions over all masks."""
    return sum(int(label_regions(np.asarray(m) > 0, connectivity=2).max()) for m in gt_masks)


def _thresholds(scores: np.ndarray, max_thresholds: int) -> np.ndarray:
    unique = np.unique(scores)
    if unique.size > max_thresholds:
        unique = np.unique(np.quantile(scores, np.linspace(0.0, 1.0, max_thresholds)))
    return unique[::-1]


def pro_curve(
    score_maps: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    max_thresholds: int = 5000,
) -> Tuple[np.ndarray, np.ndarray]:
    """False-positive rate and mean per-region overlap over a threshold sweep.

    A pixel is predicted anomalous when its score is strictly above the
    threshold. Thresholds run from high to low, so the FPR is non-decreasing.
    The curve is prefixed with the point (0, 0).

    Returns:
        ``(fprs, overlaps)`` arrays of equal length

    Raises:
        MetricUndefinedError: No ground-truth regions or no normal pixels
    """
    maps = np.stack([np.asarray(m, dtype=np.float64) for m in score_maps])
    masks = np.stack([np.asarray(m) > 0 for m in gt_masks])
    if maps.shape != masks.shape:
        raise ShapeMismatchError(
            "score maps and masks differ", expected=masks.shape, actual=maps.shape
        )

    regions = _regions(masks)
    if not regions:
        raise MetricUndefinedError("PRO", "no ground-truth regions")
    flat_scores = maps.ravel()
    normal = np.sort(flat_scores[~masks.ravel()])
    if normal.size == 0:
        raise MetricUndefinedError("PRO", "no normal pixels")

    thresholds = _thresholds(flat_scores, max_thresholds)
    fprs = 1.0 - np.searchsorted(normal, thresholds, side="right") / normal.size
    overlaps = np.zeros_like(thresholds)
    for region in regions:
        region_scores = np.sort(flat_scores[region])
        above = region_scores.size - np.searchsorted(region_scores, thresholds, side="right")
        overlaps += above / region_scores.size
    overlaps /= len(regions)
    return np.concatenate([[0.0], fprs]), np.concatenate([[0.0], overlaps])


def integrate_pro(fprs: np.ndarray, overlaps: np.ndarray, fpr_limit: float) -> float:
    """Normalized area under an overlap-vs-FPR curve on ``[0, fpr_limit]``.

    A curve that stops short of ``fpr_limit`` keeps its last overlap up to it.
    """
    inside = fprs <= fpr_limit
    x = fprs[inside]
    y = overlaps[inside]
    beyond = np.flatnonzero(~inside)
    if beyond.size:
        i = beyond[0]
        x0, y0, x1, y1 = fprs[i - 1], overlaps[i - 1], fprs[i], overlaps[i]
        y_limit = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
    else:
        y_limit = y[-1]
    x = np.append(x, fpr_limit)
    y = np.append(y, y_limit)
    return float(auc(x, y) / fpr_limit)


def pro(
    score_maps: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
    max_thresholds: int = 5000,
) -> float:
    """Per-region overlap integrated up to ``fpr_limit`` and normalized to [0, 1].

    Args:
        score_maps: Anomaly maps, one per image
        gt_masks: Binary ground-truth masks aligned with ``score_maps``
        fpr_limit: Upper FPR bound of the integration, in (0, 1]
        max_thresholds: Above this many unique scores, sweep quantiles instead

    Raises:
        MetricUndefinedError: ``fpr_limit`` out of range, no regions or no normal pixels
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise MetricUndefinedError("PRO", f"fpr_limit must be in (0, 1], got {fpr_limit}")
    fprs, overlaps = pro_curve(score_maps, gt_masks, max_thresholds)
    return integrate_pro(fprs, overlaps, fpr_limit)
