"""Synthetic anomalies: binarized Perlin masks filled with external textures.

A normal image ``I_n`` becomes ``I_a`` by overlaying a texture ``I_t`` through a
binary mask ``M`` with opacity ``beta``::

    I_a = (1 - M) * I_n + (1 - beta) * (M * I_n) + beta * (M * I_t)

Pixels outside the mask are left bit-identical to the normal image.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np
import torch
from PIL import Image, ImageEnhance, ImageOps
from scipy import ndimage
from torchvision.transforms import functional as TF

from .config import SynthesisConfig
from .data import IMAGE_SUFFIXES, read_image, resize
from .exceptions import ImageReadError, ShapeMismatchError, SynthesisError
from .logger import logger


@dataclass
class SyntheticSample:
    """An anomalous image together with the mask that produced it."""

    anomalous_image: torch.Tensor
    mask: torch.Tensor
    beta: float
    source_texture_id: str


def _fade(t: np.ndarray) -> np.ndarray:
    return ((6 * t - 15) * t + 10) * t * t * t


def perlin_noise(
    height: int, width: int, period_x: int, period_y: int, seed: int
) -> np.ndarray:
    """Gradient-lattice Perlin noise.

    The grid is divided into ``period_y`` x ``period_x`` lattice cells; when a
    period does not divide the side length, the lattice is laid over the next
    multiple and cropped.

    Args:
        height: Rows of the output grid
        width: Columns of the output grid
        period_x: Lattice cells along the width
        period_y: Lattice cells along the height
        seed: Seed for the random gradient directions

    Returns:
        ``height x width`` float64 grid in [-1, 1], zero on lattice points
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"grid dimensions must be positive, got {height}x{width}")
    if period_x <= 0 or period_y <= 0:
        raise ValueError(f"periods must be positive, got {period_x}, {period_y}")

    rng = np.random.default_rng(seed)
    cell_h = -(-height // period_y)
    cell_w = -(-width // period_x)
    angles = 2 * math.pi * rng.random((period_y + 1, period_x + 1))
    gradients = np.stack((np.cos(angles), np.sin(angles)), axis=-1)

    ys = np.arange(height) / cell_h
    xs = np.arange(width) / cell_w
    yi = np.floor(ys).astype(np.int64)
    xi = np.floor(xs).astype(np.int64)
    yf = (ys - yi)[:, None]
    xf = (xs - xi)[None, :]
    rows = yi[:, None]
    cols = xi[None, :]

    def corner(dr: int, dc: int) -> np.ndarray:
        grad = gradients[rows + dr, cols + dc]
        return grad[..., 0] * (yf - dr) + grad[..., 1] * (xf - dc)

    u = _fade(xf)
    v = _fade(yf)
    top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0))
    bottom = corner(1, 0) + u * (corner(1, 1) - corner(1, 0))
    noise = math.sqrt(2) * (top + v * (bottom - top))
    return np.clip(noise, -1.0, 1.0)


def normalize_noise(noise: np.ndarray, mode: str = "minmax") -> np.ndarray:
    """Map raw noise to [0, 1] before thresholding.

    Args:
        noise: Raw noise in [-1, 1]
        mode: ``"minmax"`` (per-grid range) or ``"affine"`` ((x + 1) / 2)

    Returns:
        Grid in [0, 1]
    """
    if mode == "affine":
        return (noise + 1.0) / 2.0
    if mode == "minmax":
        low, high = float(noise.min()), float(noise.max())
        if high <= low:
            return np.zeros_like(noise)
        return (noise - low) / (high - low)
    raise ValueError(f"Unknown noise normalization '{mode}'")


def make_mask(noise: np.ndarray, threshold: float, rotation_angle: float) -> torch.Tensor:
    """Rotate normalized noise and binarize it.

    Args:
        noise: Grid normalized to [0, 1]
        threshold: Values strictly greater than this become 1
        rotation_angle: Degrees; uncovered corners are filled with 0

    Returns:
        ``1 x H x W`` float mask of zeros and ones
    """
    if noise.ndim != 2:
        raise ShapeMismatchError("noise must be a 2-D grid", actual=noise.shape)
    if rotation_angle:
        noise = ndimage.rotate(
            noise, rotation_angle, reshape=False, order=1, mode="constant", cval=0.0
        )
    return torch.from_numpy((noise > threshold).astype(np.float32)).unsqueeze(0)


def foreground_mask(img: torch.Tensor, threshold: float) -> torch.Tensor:
    """Binary silhouette of the object in ``img``.

    The grey image (channel mean) is split at ``threshold``; the side that
    covers less of the image border is taken as the object. Degenerate or
    ambiguous splits fall back to an all-ones mask.

    Args:
        img: ``3 x H x W`` image in [0, 1]
        threshold: Grey-level split point

    Returns:
        ``1 x H x W`` float mask
    """
    grey = img.mean(dim=0)
    above = grey > threshold
    border = torch.cat([above[0], above[-1], above[1:-1, 0], above[1:-1, -1]])
    share = border.float().mean().item()
    if share < 0.5:
        fg = above
    elif share > 0.5:
        fg = ~above
    else:
        fg = None
    if fg is None or not fg.any() or fg.all():
        logger.warning("Foreground mask is degenerate; using the whole image")
        return torch.ones(1, *grey.shape)
    return fg.float().unsqueeze(0)


def blend(
    normal: torch.Tensor, texture: torch.Tensor, mask: torch.Tensor, beta: float
) -> SyntheticSample:
    """Overlay ``texture`` on ``normal`` through ``mask`` with opacity ``beta``.

    Args:
        normal: ``3 x H x W`` normal image
        texture: ``3 x H x W`` texture image
        mask: ``1 x H x W`` binary mask
        beta: Opacity in [0, 1]

    Returns:
        The anomalous image with its mask
    """
    if normal.shape != texture.shape:
        raise ShapeMismatchError(
            "normal and texture images differ", expected=normal.shape, actual=texture.shape
        )
    if mask.shape[-2:] != normal.shape[-2:]:
        raise ShapeMismatchError(
            "mask does not match image", expected=normal.shape[-2:], actual=mask.shape[-2:]
        )
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    anomalous = (1 - mask) * normal + (1 - beta) * (mask * normal) + beta * (mask * texture)
    return SyntheticSample(anomalous, mask, float(beta), "")


def _gamma(img: Image.Image, rng: np.random.Generator) -> Image.Image:
    gamma = rng.uniform(0.5, 2.0)
    return img.point(lambda v: int(round(255 * (v / 255) ** gamma)))


def _hue_shift(img: Image.Image, rng: np.random.Generator) -> Image.Image:
    shift = int(rng.integers(-50, 51))
    h, s, v = img.convert("HSV").split()
    h = h.point(lambda x: (x + shift) % 256)
    return Image.merge("HSV", (h, s, v)).convert("RGB")


TEXTURE_OPS: List[Callable[[Image.Image, np.random.Generator], Image.Image]] = [
    _gamma,
    lambda img, rng: ImageEnhance.Brightness(img).enhance(rng.uniform(0.8, 1.2)),
    lambda img, rng: ImageEnhance.Sharpness(img).enhance(rng.uniform(0.0, 2.0)),
    _hue_shift,
    lambda img, rng: ImageOps.solarize(img, int(rng.integers(32, 129))),
    lambda img, rng: ImageOps.posterize(img, int(rng.integers(4, 8))),
    lambda img, rng: ImageOps.invert(img),
    lambda img, rng: ImageOps.autocontrast(img),
    lambda img, rng: ImageOps.equalize(img),
    lambda img, rng: img.rotate(rng.uniform(-45.0, 45.0)),
]


def augment_texture(texture: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Apply three distinct random photometric/geometric operations."""
    img = TF.to_pil_image(texture.clamp(0.0, 1.0))
    for index in rng.choice(len(TEXTURE_OPS), size=3, replace=False):
        img = TEXTURE_OPS[int(index)](img, rng)
    return TF.to_tensor(img.convert("RGB"))


class TextureBank:
    """Sorted list of texture images found under a folder."""

    def __init__(self, folder: Union[str, Path]) -> None:
        """Scan ``folder`` recursively.

        Raises:
            SynthesisError: Folder missing, unreadable or without images
        """
        self.folder = Path(folder)
        if not self.folder.is_dir():
            raise SynthesisError(f"Texture folder not found: {self.folder}")
        try:
            self.paths = sorted(
                p
                for p in self.folder.rglob("*")
                if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
            )
        except OSError as e:
            raise SynthesisError(f"Cannot read texture folder {self.folder}: {e}") from e
        if not self.paths:
            raise SynthesisError(f"Texture folder contains no images: {self.folder}")

    def __len__(self) -> int:
        return len(self.paths)

    def texture_id(self, index: int) -> str:
        """Stable identifier of a texture (path relative to the folder)."""
        return self.paths[index].relative_to(self.folder).as_posix()

    def load(self, index: int, size: int) -> torch.Tensor:
        """Decode texture ``index`` resized to ``size x size``."""
        try:
            return resize(read_image(self.paths[index]), size)
        except ImageReadError as e:
            raise SynthesisError(f"Unreadable texture: {e.message}") from e


class AnomalySynthesizer:
    """Turns normal images into (anomalous image, mask) pairs."""

    def __init__(self, cfg: SynthesisConfig, textures: Optional[TextureBank] = None) -> None:
        self.cfg = cfg
        self.textures = textures if textures is not None else TextureBank(cfg.texture_source)

    def sample_mask(
        self, height: int, width: int, rng: np.random.Generator
    ) -> torch.Tensor:
        """Draw one rotated, binarized Perlin mask."""
        cfg = self.cfg
        exp_x, exp_y = rng.integers(cfg.perlin_min_exponent, cfg.perlin_max_exponent + 1, 2)
        seed = int(rng.integers(0, 2**63 - 1))
        noise = perlin_noise(height, width, 2 ** int(exp_x), 2 ** int(exp_y), seed)
        angle = float(rng.uniform(*cfg.rotation_range))
        return make_mask(
            normalize_noise(noise, cfg.noise_normalization), cfg.binarize_threshold, angle
        )

    def synthesize(self, normal: torch.Tensor, rng: np.random.Generator) -> SyntheticSample:
        """Create one synthetic anomaly for ``normal`` (``3 x S x S`` in [0, 1]).

        Empty masks are redrawn up to ``cfg.max_resample`` times; after that the
        normal image is returned unchanged with an all-zero mask.
        """
        cfg = self.cfg
        height, width = normal.shape[-2:]
        if height != width:
            raise ShapeMismatchError("synthesis expects square images", actual=normal.shape)
        fg = foreground_mask(normal, cfg.foreground_threshold) if cfg.use_foreground_mask else None

        mask = None
        for _ in range(cfg.max_resample + 1):
            candidate = self.sample_mask(height, width, rng)
            if fg is not None:
                candidate = candidate * fg
            if candidate.any():
                mask = candidate
                break
        if mask is None:
            logger.warning(
                f"No non-empty synthetic mask after {cfg.max_resample} redraws; "
                "keeping the normal image"
            )
            return SyntheticSample(normal.clone(), torch.zeros(1, height, width), 0.0, "")

        index = int(rng.integers(len(self.textures)))
        texture = self.textures.load(index, height)
        if cfg.augment_texture:
            texture = augment_texture(texture, rng)
        beta = float(rng.uniform(*cfg.beta_range))
        sample = blend(normal, texture.to(normal.dtype), mask.to(normal.dtype), beta)
        sample.source_texture_id = self.textures.texture_id(index)
        return sample

    def synthesize_batch(
        self, normals: torch.Tensor, rng: np.random.Generator
    ) -> List[SyntheticSample]:
        """One fresh synthetic anomaly per image of a ``B x 3 x S x S`` batch."""
        return [self.synthesize(img, rng) for img in normals]


def synthesize(
    normal: torch.Tensor,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
    textures: Optional[TextureBank] = None,
) -> SyntheticSample:
    """Functional form of :meth:`AnomalySynthesizer.synthesize`."""
    return AnomalySynthesizer(cfg, textures).synthesize(normal, rng)
