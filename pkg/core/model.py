"""One-class bottleneck, student decoder and guided information injection.

Data flow for a teacher pyramid ``[t1, t2, t3]``::

    embedding = bottleneck([t1, t2, t3])          # B x 2048 x H3/2 x W3/2
    s3 = S3(embedding)
    s2 = S2(gii_2(t2, t3, s3))
    s1 = S1(gii_1(t1, t2, s2))

Teacher features are detached on entry, so only the student optimizer ever
sees gradients from this path.
"""

from typing import List, Optional, Sequence, Type

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models.resnet import Bottleneck, conv1x1, conv3x3

from .backbone import FeaturePyramid, check_pyramid, get_architecture
from .config import GII_MODES, ModelConfig
from .exceptions import ShapeMismatchError


def deconv2x2(in_planes: int, out_planes: int, stride: int = 1) -> nn.ConvTranspose2d:
    """2x2 transposed convolution (upsampling by ``stride``)."""
    return nn.ConvTranspose2d(in_planes, out_planes, kernel_size=2, stride=stride, bias=False)


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            nn.init.constant_(m.weight, 1)
            nn.init.constant_(m.bias, 0)


class DeBottleneck(nn.Module):
    """Residual bottleneck block with upsampling in place of downsampling."""

    expansion = 4

    def __init__(
        self,
        inplanes: int,
        planes: int,
        stride: int = 1,
        upsample: Optional[nn.Module] = None,
        base_width: int = 64,
        expansion: int = 4,
    ) -> None:
        super().__init__()
        self.expansion = expansion
        width = int(planes * (base_width / 64.0))
        self.conv1 = conv1x1(inplanes, width)
        self.bn1 = nn.BatchNorm2d(width)
        if stride == 2:
            self.conv2 = deconv2x2(width, width, stride)
        else:
            self.conv2 = conv3x3(width, width)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = conv1x1(width, planes * self.expansion)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.upsample = upsample

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.upsample is None else self.upsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


def _decoder_stage(
    inplanes: int, planes: int, blocks: int, base_width: int, expansion: int
) -> nn.Sequential:
    out = planes * expansion
    upsample = nn.Sequential(deconv2x2(inplanes, out, 2), nn.BatchNorm2d(out))
    layers = [DeBottleneck(inplanes, planes, 2, upsample, base_width, expansion)]
    layers.extend(
        DeBottleneck(out, planes, base_width=base_width, expansion=expansion)
        for _ in range(1, blocks)
    )
    return nn.Sequential(*layers)


class OneClassBottleneck(nn.Module):
    """Multi-scale feature fusion followed by a one-class embedding stage.

    Levels 1 and 2 are brought to level-3 scale with stride-2 3x3 convolutions,
    concatenated with level 3, and compressed by one residual stage that halves
    the spatial size into a ``512 * expansion``-channel embedding (2048 for the
    standard encoders).
    """

    def __init__(
        self, blocks: int = 3, base_width: int = 128, block: Type[Bottleneck] = Bottleneck
    ) -> None:
        super().__init__()
        e = block.expansion
        self.conv1 = conv3x3(64 * e, 128 * e, 2)
        self.bn1 = nn.BatchNorm2d(128 * e)
        self.conv2 = conv3x3(128 * e, 256 * e, 2)
        self.bn2 = nn.BatchNorm2d(256 * e)
        self.conv3 = conv3x3(128 * e, 256 * e, 2)
        self.bn3 = nn.BatchNorm2d(256 * e)
        self.relu = nn.ReLU(inplace=True)

        fused = 3 * 256 * e
        self.out_channels = 512 * e
        downsample = nn.Sequential(
            conv1x1(fused, self.out_channels, 2), nn.BatchNorm2d(self.out_channels)
        )
        layers = [block(fused, 512, 2, downsample, base_width=base_width)]
        layers.extend(
            block(self.out_channels, 512, base_width=base_width) for _ in range(1, blocks)
        )
        self.oce = nn.Sequential(*layers)
        _init_weights(self)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        check_pyramid(pyramid, "teacher pyramid")
        t1, t2, t3 = pyramid
        l1 = self.relu(self.bn2(self.conv2(self.relu(self.bn1(self.conv1(t1))))))
        l2 = self.relu(self.bn3(self.conv3(t2)))
        return self.oce(torch.cat([l1, l2, t3], dim=1)).contiguous()


def _conv(in_ch: int, out_ch: int, kernel: int, activation: bool) -> nn.Module:
    conv = nn.Conv2d(in_ch, out_ch, kernel_size=kernel, padding=kernel // 2)
    if not activation:
        return conv
    return nn.Sequential(conv, nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True))


class GuidedInjection(nn.Module):
    """Similarity-gated injection of fused teacher features into the student.

    Args:
        low_channels: Channels of the finer teacher level ``F_T^i``
        high_channels: Channels of ``F_T^{i+1}`` and ``F_S^{i+1}``
        mode: ``"attention"`` gates by cosine similarity; ``"skip"`` injects the
            fused teacher feature without gating
        activation: Follow every convolution with batch norm and ReLU
    """

    def __init__(
        self,
        low_channels: int,
        high_channels: int,
        mode: str = "attention",
        activation: bool = False,
    ) -> None:
        super().__init__()
        if mode not in ("attention", "skip"):
            raise ValueError(f"GuidedInjection mode must be 'attention' or 'skip', got '{mode}'")
        self.mode = mode
        self.lift = _conv(low_channels, high_channels, 1, activation)
        self.fuse = _conv(high_channels, high_channels, 3, activation)
        self.attend = _conv(high_channels, high_channels, 3, activation)
        self.merge = _conv(2 * high_channels, high_channels, 3, activation)

    def fuse_teacher(self, teacher_low: torch.Tensor, teacher_high: torch.Tensor) -> torch.Tensor:
        """Downsample, lift and fuse the two teacher levels."""
        lifted = self.lift(F.avg_pool2d(teacher_low, kernel_size=2, stride=2))
        return self.fuse(lifted + teacher_high)

    @staticmethod
    def similarity(teacher_high: torch.Tensor, student_high: torch.Tensor) -> torch.Tensor:
        """Per-location cosine similarity across channels, shape ``B x 1 x H x W``."""
        return F.cosine_similarity(teacher_high, student_high, dim=1, eps=1e-8).unsqueeze(1)

    @staticmethod
    def gate(fused: torch.Tensor, student_high: torch.Tensor, sim: torch.Tensor) -> torch.Tensor:
        """``fused * sim + student * (1 - sim)``; ``sim`` is used unclamped."""
        return fused * sim + student_high * (1 - sim)

    def forward(
        self,
        teacher_low: torch.Tensor,
        teacher_high: torch.Tensor,
        student_high: torch.Tensor,
    ) -> torch.Tensor:
        b, _, h, w = teacher_high.shape
        if teacher_low.shape[0] != b or teacher_low.shape[-2:] != (2 * h, 2 * w):
            raise ShapeMismatchError(
                "finer teacher level must be twice the coarser one",
                expected=(b, None, 2 * h, 2 * w),
                actual=teacher_low.shape,
            )
        if student_high.shape != teacher_high.shape:
            raise ShapeMismatchError(
                "student feature must match the teacher level",
                expected=teacher_high.shape,
                actual=student_high.shape,
            )
        fused = self.fuse_teacher(teacher_low, teacher_high)
        if self.mode == "skip":
            attended = self.attend(fused)
        else:
            sim = self.similarity(teacher_high, student_high)
            attended = self.attend(self.gate(fused, student_high, sim))
        return self.merge(torch.cat([attended, student_high], dim=1))


class StudentDecoder(nn.Module):
    """Decoder stages S3, S2, S1 mirroring the encoder stages."""

    def __init__(
        self, layers: Sequence[int] = (3, 4, 6), base_width: int = 128, expansion: int = 4
    ) -> None:
        super().__init__()
        e = expansion
        self.s3 = _decoder_stage(512 * e, 256, layers[0], base_width, e)
        self.s2 = _decoder_stage(256 * e, 128, layers[1], base_width, e)
        self.s1 = _decoder_stage(128 * e, 64, layers[2], base_width, e)
        _init_weights(self)


class StudentNet(nn.Module):
    """Bottleneck, decoder and injection modules, trained by one optimizer."""

    def __init__(
        self,
        architecture: str = "wide_resnet50_2",
        gii_mode: str = "attention",
        gii_activation: bool = False,
    ) -> None:
        super().__init__()
        if gii_mode not in GII_MODES:
            raise ValueError(f"gii_mode must be one of {GII_MODES}, got '{gii_mode}'")
        arch = get_architecture(architecture)
        self.architecture = architecture
        self.gii_mode = gii_mode
        self.bottleneck = OneClassBottleneck(
            arch.embedding_blocks, arch.width_per_group, arch.block
        )
        self.decoder = StudentDecoder(arch.layers, arch.width_per_group, arch.expansion)
        if gii_mode == "off":
            self.gii = None
        else:
            e = arch.expansion
            self.gii = nn.ModuleDict(
                {
                    "before_s2": GuidedInjection(128 * e, 256 * e, gii_mode, gii_activation),
                    "before_s1": GuidedInjection(64 * e, 128 * e, gii_mode, gii_activation),
                }
            )

    def forward(self, teacher: FeaturePyramid) -> FeaturePyramid:
        teacher = [t.detach() for t in teacher]
        return student_forward(bottleneck_forward(teacher, self.bottleneck), teacher, self)


def bottleneck_forward(teacher: FeaturePyramid, bottleneck: OneClassBottleneck) -> torch.Tensor:
    """Compress a (detached) teacher pyramid into the student's embedding."""
    return bottleneck([t.detach() for t in teacher])


def gii_forward(
    teacher_low: torch.Tensor,
    teacher_high: torch.Tensor,
    student_high: torch.Tensor,
    state: Optional[GuidedInjection],
) -> torch.Tensor:
    """Guided injection before a decoder stage; ``state=None`` passes the student through."""
    if state is None:
        return student_high
    return state(teacher_low.detach(), teacher_high.detach(), student_high)


def student_forward(
    embedding: torch.Tensor, teacher: FeaturePyramid, student: StudentNet
) -> FeaturePyramid:
    """Decode ``embedding`` into a student pyramid matching the teacher's shapes."""
    t1, t2, t3 = teacher
    gii = student.gii
    decoder = student.decoder
    s3 = decoder.s3(embedding)
    s2 = decoder.s2(gii_forward(t2, t3, s3, gii["before_s2"] if gii is not None else None))
    s1 = decoder.s1(gii_forward(t1, t2, s2, gii["before_s1"] if gii is not None else None))
    student_pyramid: List[torch.Tensor] = [s1, s2, s3]
    for level, (s, t) in enumerate(zip(student_pyramid, teacher), 1):
        if s.shape != t.shape:
            raise ShapeMismatchError(
                f"student level {level} does not match the teacher",
                expected=t.shape,
                actual=s.shape,
            )
    return student_pyramid


def build_student(cfg: ModelConfig) -> StudentNet:
    """Student network for ``cfg.architecture`` with the configured injection wiring."""
    return StudentNet(cfg.architecture, cfg.gii_mode, cfg.gii_activation)
