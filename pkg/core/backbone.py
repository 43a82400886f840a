"""Three-stage wide residual encoders used as expert and teacher."""

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Type

import torch
from torch import nn
from torchvision.models import ResNet50_Weights, WeightsEnum, Wide_ResNet50_2_Weights
from torchvision.models.resnet import Bottleneck, ResNet

from .exceptions import ShapeMismatchError, WeightLoadError
from .logger import logger

FeaturePyramid = List[torch.Tensor]

INPUT_STRIDE = 32


class SlimBottleneck(Bottleneck):
    """Bottleneck block whose output keeps the inner width (no 4x expansion)."""

    expansion = 1


@dataclass(frozen=True)
class Architecture:
    """Depth/width of the bottleneck residual stages an encoder uses."""

    name: str
    layers: Tuple[int, int, int]
    width_per_group: int
    weights: Optional[WeightsEnum]
    embedding_blocks: int = 3
    block: Type[Bottleneck] = Bottleneck

    @property
    def expansion(self) -> int:
        return self.block.expansion

    @property
    def level_channels(self) -> Tuple[int, int, int]:
        """Channels of the three encoder levels."""
        e = self.expansion
        return (64 * e, 128 * e, 256 * e)


ARCHITECTURES: Dict[str, Architecture] = {
    "wide_resnet50_2": Architecture(
        "wide_resnet50_2", (3, 4, 6), 128, Wide_ResNet50_2_Weights.IMAGENET1K_V1
    ),
    "resnet50": Architecture("resnet50", (3, 4, 6), 64, ResNet50_Weights.IMAGENET1K_V1),
    # Desk-scale variant: one unexpanded block per stage, no pretrained weights.
    "wide_resnet_tiny": Architecture(
        "wide_resnet_tiny", (1, 1, 1), 64, None, embedding_blocks=1, block=SlimBottleneck
    ),
}


@dataclass
class EncoderSpec:
    """What to build and where its weights come from."""

    architecture: str = "wide_resnet50_2"
    pretrained_weights: str = "imagenet"
    stages_used: int = 3
    trainable: bool = True
    norm_eval: bool = False


def get_architecture(name: str) -> Architecture:
    """Look up a registered architecture."""
    try:
        return ARCHITECTURES[name]
    except KeyError:
        raise WeightLoadError(
            f"Unknown architecture '{name}'; known: {sorted(ARCHITECTURES)}", name
        ) from None


def _registry_state_dict(arch: Architecture) -> Dict[str, torch.Tensor]:
    if arch.weights is None:
        raise WeightLoadError(
            f"Architecture '{arch.name}' has no registry weights; use 'none' or a file path",
            "imagenet",
        )
    model_dir = os.environ.get("ETS_WEIGHTS_DIR")
    try:
        return arch.weights.get_state_dict(progress=False, model_dir=model_dir)
    except (OSError, RuntimeError, ValueError) as e:
        raise WeightLoadError(
            f"Cannot fetch pretrained weights for '{arch.name}': {e}", str(arch.weights)
        ) from e


def _file_state_dict(path: Path) -> Dict[str, torch.Tensor]:
    if not path.is_file():
        raise WeightLoadError(f"Weight file not found: {path}", str(path))
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, ValueError) as e:
        raise WeightLoadError(f"Cannot read weight file {path}: {e}", str(path)) from e
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise WeightLoadError(f"Weight file {path} holds no state dict", str(path))
    return state


class Encoder(nn.Module):
    """Stem plus the first three residual stages of a bottleneck ResNet."""

    def __init__(self, spec: EncoderSpec) -> None:
        super().__init__()
        if spec.stages_used != 3:
            raise ValueError("encoders expose exactly three stages")
        self.spec = spec
        self.architecture = get_architecture(spec.architecture)
        arch = self.architecture
        net = ResNet(arch.block, [*arch.layers, 1], width_per_group=arch.width_per_group)
        self._load_weights(net, spec.pretrained_weights)

        self.conv1 = net.conv1
        self.bn1 = net.bn1
        self.relu = net.relu
        self.maxpool = net.maxpool
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.out_channels = arch.level_channels
        self.frozen = False
        self.norm_eval = spec.norm_eval
        self.requires_grad_(spec.trainable)

    def _load_weights(self, net: ResNet, source: str) -> None:
        if source in ("", "none"):
            logger.info(f"Encoder '{self.architecture.name}' uses random initialization")
            return
        if source == "imagenet":
            state = _registry_state_dict(self.architecture)
        else:
            state = _file_state_dict(Path(source))
        state = {k: v for k, v in state.items() if not k.startswith(("layer4.", "fc."))}
        own = {k: v for k, v in net.state_dict().items() if not k.startswith(("layer4.", "fc."))}
        missing = sorted(set(own) - set(state))
        if missing:
            raise WeightLoadError(
                f"Weights lack {len(missing)} encoder entries (first: {missing[0]})", source
            )
        for key, value in state.items():
            if key in own and own[key].shape != value.shape:
                raise WeightLoadError(
                    f"Weight shape mismatch for '{key}': "
                    f"{tuple(value.shape)} vs {tuple(own[key].shape)}",
                    source,
                )
        net.load_state_dict(state, strict=False)
        logger.info(f"Loaded '{self.architecture.name}' weights from {source}")

    def train(self, mode: bool = True) -> "Encoder":
        """Switch mode; frozen encoders stay in inference mode."""
        super().train(mode and not self.frozen)
        if mode and self.norm_eval:
            for module in self.modules():
                if isinstance(module, nn.modules.batchnorm._BatchNorm):
                    module.eval()
        return self

    def freeze(self) -> "Encoder":
        """Make the encoder permanently non-trainable and inference-only."""
        self.frozen = True
        self.requires_grad_(False)
        return self.train(False)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeMismatchError("encoder expects a B x 3 x H x W batch", actual=x.shape)
        if x.shape[-2] % INPUT_STRIDE or x.shape[-1] % INPUT_STRIDE:
            raise ShapeMismatchError(
                f"input height and width must be divisible by {INPUT_STRIDE}",
                actual=x.shape[-2:],
            )
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        level1 = self.layer1(x)
        level2 = self.layer2(level1)
        level3 = self.layer3(level2)
        return [level1, level2, level3]


def build_encoder(spec: EncoderSpec) -> Encoder:
    """Construct an encoder and load its weights.

    Args:
        spec: Architecture, weight source and trainability

    Returns:
        Encoder producing levels of ``level_channels`` (256/512/1024 for
        the standard architectures) at strides 4/8/16
    """
    return Encoder(spec)


def build_expert_and_teacher(spec: EncoderSpec) -> Tuple[Encoder, Encoder]:
    """Build the frozen expert and the trainable teacher from one initialization.

    Returns:
        ``(expert, teacher)`` with bit-identical parameters
    """
    teacher = build_encoder(spec)
    expert = copy.deepcopy(teacher).freeze()
    return expert, teacher


def encode(encoder: Encoder, batch: torch.Tensor) -> FeaturePyramid:
    """Run ``encoder`` on a normalized batch; frozen encoders never track gradients."""
    if encoder.frozen:
        with torch.no_grad():
            return encoder(batch)
    return encoder(batch)


def check_pyramid(pyramid: FeaturePyramid, name: str = "pyramid") -> None:
    """Validate level count and the 2x spatial / channel ratios between levels."""
    if len(pyramid) != 3:
        raise ShapeMismatchError(f"{name} must have 3 levels", actual=(len(pyramid),))
    for upper, lower in zip(pyramid[:-1], pyramid[1:]):
        if upper.dim() != 4 or lower.dim() != 4:
            raise ShapeMismatchError(f"{name} levels must be 4-D", actual=upper.shape)
        b, c, h, w = upper.shape
        expected = (b, 2 * c, h // 2, w // 2)
        if tuple(lower.shape) != expected or h % 2 or w % 2:
            raise ShapeMismatchError(
                f"{name} levels are not a 2x pyramid", expected=expected, actual=lower.shape
            )
