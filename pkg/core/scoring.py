"""Anomaly maps, heat maps and test-set evaluation.

At inference only the teacher and the student take part: each feature level
contributes its per-pixel cosine distance, upsampled to the input size; the
three maps are summed and smoothed with a Gaussian filter.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter
from torch import nn
from tqdm import tqdm

from .backbone import FeaturePyramid, encode
from .config import EvalConfig
from .data import CategoryDataset, normalize, stack_samples
from .exceptions import ShapeMismatchError
from .logger import logger
from .losses import cosine_distance_map
from .metrics import auroc, average_precision, count_regions, pro

GAUSSIAN_TRUNCATE = 4.0


@dataclass
class AnomalyMap:
    """Per-pixel anomaly scores of one image and their maximum."""

    map: np.ndarray
    image_score: float


@dataclass
class MetricsReport:
    """Image and pixel metrics for one category's test split."""

    i_auc: float
    i_ap: float
    p_auc: float
    p_ap: float
    p_pro: float
    n_images: int
    n_pixels: int
    n_gt_regions: int

    def metrics(self) -> Dict[str, float]:
        """The five metric values."""
        return {
            "i_auc": self.i_auc,
            "i_ap": self.i_ap,
            "p_auc": self.p_auc,
            "p_ap": self.p_ap,
            "p_pro": self.p_pro,
        }

    def to_dict(self) -> Dict[str, Union[float, int]]:
        return asdict(self)

    def table(self) -> str:
        """One-line summary of the five metrics."""
        return "  ".join(f"{key}={value:.4f}" for key, value in self.metrics().items())


def smooth(maps: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-smooth each ``H x W`` map of a ``B x H x W`` stack (reflect borders)."""
    if sigma <= 0:
        return maps
    return np.stack(
        [gaussian_filter(m, sigma=sigma, truncate=GAUSSIAN_TRUNCATE, mode="reflect") for m in maps]
    )


def anomaly_maps(
    teacher: FeaturePyramid,
    student: FeaturePyramid,
    out_size: Tuple[int, int],
    sigma: float = 4.0,
) -> np.ndarray:
    """Anomaly maps for a batch of teacher/student pyramids.

    Returns:
        ``B x H x W`` float32 array, non-negative
    """
    if len(teacher) != len(student):
        raise ShapeMismatchError(
            "teacher and student pyramids differ in depth",
            expected=(len(teacher),),
            actual=(len(student),),
        )
    total = None
    for t, s in zip(teacher, student):
        distance = cosine_distance_map(t.detach(), s.detach()).clamp_min(0.0)
        upsampled = F.interpolate(
            distance.unsqueeze(1).float(),
            size=tuple(out_size),
            mode="bilinear",
            align_corners=False,
        ).squeeze(1)
        total = upsampled if total is None else total + upsampled
    maps = total.cpu().numpy().astype(np.float32)
    return smooth(maps, sigma).astype(np.float32)


def anomaly_map(
    teacher: FeaturePyramid,
    student: FeaturePyramid,
    out_size: Tuple[int, int],
    sigma: float = 4.0,
) -> AnomalyMap:
    """Anomaly map of a single image; the image score is the map's maximum."""
    if teacher[0].shape[0] != 1:
        raise ShapeMismatchError("anomaly_map expects a batch of one", actual=teacher[0].shape)
    scores = anomaly_maps(teacher, student, out_size, sigma)[0]
    return AnomalyMap(scores, float(scores.max()))


@torch.no_grad()
def predict(
    teacher: nn.Module, student: nn.Module, images: torch.Tensor, sigma: float = 4.0
) -> np.ndarray:
    """Anomaly maps for a ``B x 3 x S x S`` batch of [0, 1] images."""
    was_training = (teacher.training, student.training)
    teacher.eval()
    student.eval()
    try:
        device = next(student.parameters()).device
        t = encode(teacher, normalize(images.to(device)))
        s = student(t)
        return anomaly_maps(t, s, images.shape[-2:], sigma)
    finally:
        teacher.train(was_training[0])
        student.train(was_training[1])


def predict_dataset(
    teacher: nn.Module,
    student: nn.Module,
    dataset: CategoryDataset,
    sigma: float = 4.0,
    batch_size: int = 8,
    progress: bool = False,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score every item of ``dataset`` in order.

    Returns:
        ``(maps, labels, masks)`` with shapes ``N x S x S``, ``N`` and ``N x S x S``
    """
    maps: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    masks: List[np.ndarray] = []
    starts = range(0, len(dataset), batch_size)
    for start in tqdm(starts, desc="scoring", disable=not progress):
        images, batch_labels, batch_masks = stack_samples(
            [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        )
        maps.append(predict(teacher, student, images, sigma))
        labels.append(batch_labels.numpy())
        masks.append(batch_masks[:, 0].numpy() > 0.5)
    return np.concatenate(maps), np.concatenate(labels), np.concatenate(masks)


def pixel_auroc(
    teacher: nn.Module,
    student: nn.Module,
    dataset: CategoryDataset,
    sigma: float = 4.0,
    batch_size: int = 8,
) -> float:
    """Pooled pixel AUROC over ``dataset``, used as the validation signal."""
    maps, _, masks = predict_dataset(teacher, student, dataset, sigma, batch_size)
    return auroc(maps.ravel(), masks.ravel())


def write_heatmap(scores: np.ndarray, path: Union[str, Path]) -> Path:
    """Write an 8-bit PNG with per-image min-max scaling plus a sidecar JSON.

    The sidecar ``<name>.json`` records the raw score range so that the PNG can
    be mapped back to scores.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    low, high = float(scores.min()), float(scores.max())
    span = high - low
    scaled = np.zeros_like(scores) if span <= 0 else (scores - low) / span
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path)
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump({"min": low, "max": high}, f, indent=2)
    return path


def heatmap_name(image_path: Path, defect_type: str) -> str:
    """File name of an image's heat map: ``<defect>_<stem>.png``."""
    prefix = f"{defect_type}_" if defect_type else ""
    return f"{prefix}{Path(image_path).stem}.png"


def evaluate(
    teacher: nn.Module,
    student: nn.Module,
    dataset: CategoryDataset,
    cfg: Optional[EvalConfig] = None,
    heatmap_dir: Optional[Union[str, Path]] = None,
) -> MetricsReport:
    """Score a test split and compute image and pixel metrics.

    Args:
        teacher: Trained teacher encoder
        student: Trained student network
        dataset: Test split with labels and masks
        cfg: Smoothing, PRO and batching settings
        heatmap_dir: If given, one heat map per test image is written there

    Returns:
        Metrics report; pixel metrics pool all pixels of all images

    Raises:
        MetricUndefinedError: A metric has no valid input (e.g. one class only)
    """
    cfg = cfg or EvalConfig()
    maps, labels, masks = predict_dataset(
        teacher, student, dataset, cfg.sigma, cfg.batch_size, progress=True
    )
    image_scores = maps.reshape(len(maps), -1).max(axis=1)

    if heatmap_dir is not None:
        for scores, path, defect in zip(maps, dataset.paths, dataset.defect_types):
            write_heatmap(scores, Path(heatmap_dir) / heatmap_name(path, defect))
        logger.info(f"Wrote {len(maps)} heat maps to {heatmap_dir}")

    report = MetricsReport(
        i_auc=auroc(image_scores, labels),
        i_ap=average_precision(image_scores, labels),
        p_auc=auroc(maps.ravel(), masks.ravel()),
        p_ap=average_precision(maps.ravel(), masks.ravel()),
        p_pro=pro(list(maps), list(masks), cfg.fpr_limit, cfg.pro_max_thresholds),
        n_images=int(len(maps)),
        n_pixels=int(maps.size),
        n_gt_regions=count_regions(list(masks)),
    )
    logger.info(f"Evaluation: {report.table()}")
    return report


def score_images(
    teacher: nn.Module, student: nn.Module, images: Sequence[torch.Tensor], sigma: float = 4.0
) -> List[AnomalyMap]:
    """Anomaly maps of individual ``3 x S x S`` images."""
    results = []
    for image in images:
        scores = predict(teacher, student, image.unsqueeze(0), sigma)[0]
        results.append(AnomalyMap(scores, float(scores.max())))
    return results
