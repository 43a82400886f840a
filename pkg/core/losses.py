"""Teacher sensitivity loss and student denoising loss."""

from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .backbone import FeaturePyramid
from .exceptions import ShapeMismatchError

EPS = 1e-8


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what} shapes differ", expected=a.shape, actual=b.shape)


def _cosine(a: torch.Tensor, b: torch.Tensor, dim: int) -> torch.Tensor:
    dot = (a * b).sum(dim=dim)
    norms = a.norm(dim=dim).clamp_min(EPS) * b.norm(dim=dim).clamp_min(EPS)
    return dot / norms


def cosine_distance_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``1 - cos`` between the channel vectors of two ``B x C x H x W`` levels.

    Returns:
        ``B x H x W`` map with values in [0, 2]
    """
    _same_shape(a, b, "feature level")
    if a.dim() != 4 or a.shape[1] < 1:
        raise ShapeMismatchError("feature levels must be B x C x H x W", actual=a.shape)
    return 1.0 - _cosine(a, b, dim=1)


def downsample_mask(
    mask: torch.Tensor, level_shape: Sequence[int], mode: str = "area"
) -> torch.Tensor:
    """Pool an input-resolution mask down to a feature level's size.

    Args:
        mask: ``B x 1 x H x W`` or ``B x H x W`` mask in [0, 1]
        level_shape: Target ``(h, w)``; must divide ``(H, W)``
        mode: ``"area"`` (soft, mean over each cell) or ``"max"``

    Returns:
        ``B x h x w`` mask in [0, 1]
    """
    if mask.dim() == 3:
        mask = mask.unsqueeze(1)
    height, width = mask.shape[-2:]
    h, w = int(level_shape[0]), int(level_shape[1])
    if h <= 0 or w <= 0 or height % h or width % w:
        raise ShapeMismatchError(
            "level size must divide the mask size", expected=(height, width), actual=(h, w)
        )
    kernel = (height // h, width // w)
    if mode == "area":
        pooled = F.avg_pool2d(mask.float(), kernel_size=kernel, stride=kernel)
    elif mode == "max":
        pooled = F.max_pool2d(mask.float(), kernel_size=kernel, stride=kernel)
    else:
        raise ValueError(f"Unknown mask pooling '{mode}'")
    return pooled.squeeze(1)


def _sensitivity_term(
    teacher: FeaturePyramid, expert: FeaturePyramid, mask: Optional[torch.Tensor], pooling: str
) -> torch.Tensor:
    total = teacher[0].new_zeros(())
    for t, e in zip(teacher, expert):
        distance = cosine_distance_map(t, e)
        if mask is None:
            target = torch.zeros_like(distance)
        else:
            target = downsample_mask(mask, distance.shape[-2:], pooling).to(distance.dtype)
        total = total + (distance - target).abs().mean(dim=(1, 2)).mean()
    return total


def teacher_loss_terms(
    teacher_normal: FeaturePyramid,
    teacher_anomalous: FeaturePyramid,
    expert_normal: FeaturePyramid,
    mask: torch.Tensor,
    pooling: str = "area",
) -> Tuple[torch.Tensor, torch.Tensor]:
    """The normal-branch and anomalous-branch parts of the teacher loss.

    The normal branch targets an all-zero mask; the anomalous branch targets
    ``mask`` pooled to each level. Both compare against the expert's features of
    the normal image. Each part is summed over levels and averaged over the batch.
    """
    if not len(teacher_normal) == len(teacher_anomalous) == len(expert_normal):
        raise ShapeMismatchError("pyramids have different level counts")
    for tn, ta, e in zip(teacher_normal, teacher_anomalous, expert_normal):
        _same_shape(tn, e, "teacher/expert level")
        _same_shape(ta, e, "teacher/expert level")
    expert_normal = [e.detach() for e in expert_normal]
    normal = _sensitivity_term(teacher_normal, expert_normal, None, pooling)
    anomalous = _sensitivity_term(teacher_anomalous, expert_normal, mask, pooling)
    return normal, anomalous


def teacher_loss(
    teacher_normal: FeaturePyramid,
    teacher_anomalous: FeaturePyramid,
    expert_normal: FeaturePyramid,
    mask: torch.Tensor,
    pooling: str = "area",
) -> torch.Tensor:
    """Teacher sensitivity loss: sum of both branches of :func:`teacher_loss_terms`."""
    normal, anomalous = teacher_loss_terms(
        teacher_normal, teacher_anomalous, expert_normal, mask, pooling
    )
    return normal + anomalous


def flatten_feature(feature: torch.Tensor) -> torch.Tensor:
    """Reshape each sample's ``C x H x W`` feature into one vector."""
    return feature.reshape(feature.shape[0], -1)


def student_loss(
    student_normal: FeaturePyramid,
    student_anomalous: FeaturePyramid,
    expert_normal: Optional[FeaturePyramid],
    teacher_normal: FeaturePyramid,
) -> torch.Tensor:
    """Student denoising loss.

    For every level and every target (expert and teacher features of the normal
    image), adds ``1 - cos`` of the flattened student features for the normal
    and the anomalous input. Targets are detached. ``expert_normal=None`` keeps
    the teacher target only.
    """
    targets = [teacher_normal] if expert_normal is None else [expert_normal, teacher_normal]
    total = student_normal[0].new_zeros(())
    for level, (s_n, s_a) in enumerate(zip(student_normal, student_anomalous)):
        _same_shape(s_n, s_a, "student level")
        f_n = flatten_feature(s_n)
        f_a = flatten_feature(s_a)
        for target in targets:
            _same_shape(s_n, target[level], "student/target level")
            f_t = flatten_feature(target[level].detach())
            term = (1.0 - _cosine(f_n, f_t, dim=1)) + (1.0 - _cosine(f_a, f_t, dim=1))
            total = total + term.mean()
    return total
