"""Category datasets in the MVTec folder convention or a JSON-lines manifest.

Images are returned as float tensors in [0, 1] (``3 x S x S``); masks as
``1 x S x S`` tensors holding only 0 and 1. Channel normalization is applied by
:func:`normalize` right before a batch enters an encoder, so that anomaly
synthesis can blend in plain image space.
"""

import json
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset
from torchvision.transforms import functional as TF

from .config import DatasetSpec
from .exceptions import DatasetLayoutError, ImageReadError, ShapeMismatchError
from .logger import logger

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
MASK_SUFFIXES = (".png",)
MASK_MODES = ("1", "L", "I", "I;16", "P")

# Statistics of the corpus the encoder weights were pretrained on.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class Sample(NamedTuple):
    """One dataset item."""

    image: torch.Tensor
    label: int
    mask: torch.Tensor


class _Entry(NamedTuple):
    image_path: Path
    label: int
    mask_path: Optional[Path]
    defect_type: str


def list_images(folder: Path) -> List[Path]:
    """Image files of ``folder`` in lexicographic order."""
    return sorted(
        p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def read_image(path: Path) -> torch.Tensor:
    """Decode an RGB image into a ``3 x H x W`` float tensor in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ImageReadError(str(path), f"unsupported format '{path.suffix}'")
    try:
        with Image.open(path) as img:
            return TF.to_tensor(img.convert("RGB"))
    except (OSError, UnidentifiedImageError) as e:
        raise ImageReadError(str(path), str(e)) from e


def read_mask(path: Path) -> torch.Tensor:
    """Decode a single-channel PNG mask into a binary ``1 x H x W`` tensor."""
    path = Path(path)
    if path.suffix.lower() not in MASK_SUFFIXES:
        raise ImageReadError(str(path), "masks must be PNG files")
    try:
        with Image.open(path) as img:
            if img.mode not in MASK_MODES:
                raise ImageReadError(
                    str(path), f"mask must be single-channel, got mode '{img.mode}'"
                )
            values = torch.from_numpy(np.array(img, dtype=np.float32))
    except (OSError, UnidentifiedImageError) as e:
        raise ImageReadError(str(path), str(e)) from e
    return (values > 0).float().unsqueeze(0)


def resize(img: torch.Tensor, size: int, is_mask: bool = False) -> torch.Tensor:
    """Resize a ``C x H x W`` image or mask to ``size x size``.

    Shrinking averages over each output pixel's source area; enlarging is
    bilinear. Masks are resampled the same way and thresholded at 0.5 back
    to {0, 1}.

    Args:
        img: Image or mask tensor
        size: Target side length in pixels
        is_mask: Threshold the result back to binary values

    Returns:
        Resized tensor of the same kind
    """
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    if img.dim() != 3:
        raise ShapeMismatchError("resize expects a C x H x W tensor", actual=img.shape)
    if img.shape[-2:] == (size, size):
        return img.clone()
    batch = img.unsqueeze(0).float()
    if size <= min(img.shape[-2:]):
        out = F.interpolate(batch, size=(size, size), mode="area")
    else:
        # one side may still shrink; antialias only affects shrinking axes
        out = F.interpolate(
            batch, size=(size, size), mode="bilinear", align_corners=False, antialias=True
        )
    out = out.squeeze(0)
    if is_mask:
        return (out > 0.5).float()
    return out.clamp_(0.0, 1.0)


def normalize(batch: torch.Tensor) -> torch.Tensor:
    """Channel-normalize a ``B x 3 x H x W`` (or ``3 x H x W``) batch in [0, 1]."""
    mean = torch.tensor(IMAGENET_MEAN, dtype=batch.dtype, device=batch.device)
    std = torch.tensor(IMAGENET_STD, dtype=batch.dtype, device=batch.device)
    shape = (-1, 1, 1)
    return (batch - mean.view(shape)) / std.view(shape)


def _require_dir(path: Path) -> Path:
    if not path.is_dir():
        raise DatasetLayoutError("Missing dataset folder", str(path))
    return path


def _find_mask(gt_dir: Path, image_path: Path) -> Path:
    for name in (f"{image_path.stem}_mask.png", f"{image_path.stem}.png"):
        candidate = gt_dir / name
        if candidate.is_file():
            return candidate
    raise DatasetLayoutError(
        "Anomalous test image has no mask file", str(gt_dir / f"{image_path.stem}_mask.png")
    )


def _scan_folder(spec: DatasetSpec) -> List[_Entry]:
    category_dir = _require_dir(Path(spec.root_path) / spec.category)
    if spec.split == "train":
        good_dir = _require_dir(category_dir / "train" / "good")
        return [_Entry(p, 0, None, "good") for p in list_images(good_dir)]

    test_dir = _require_dir(category_dir / "test")
    entries: List[_Entry] = []
    # "good" first, then defect folders; files lexicographic within each folder
    defect_dirs = sorted(
        (p for p in test_dir.iterdir() if p.is_dir()),
        key=lambda p: (p.name != "good", p.name),
    )
    for defect_dir in defect_dirs:
        images = list_images(defect_dir)
        if defect_dir.name == "good":
            entries.extend(_Entry(p, 0, None, "good") for p in images)
            continue
        gt_dir = _require_dir(category_dir / "ground_truth" / defect_dir.name)
        entries.extend(
            _Entry(p, 1, _find_mask(gt_dir, p), defect_dir.name) for p in images
        )
    return entries


def _scan_manifest(spec: DatasetSpec) -> List[_Entry]:
    manifest = Path(spec.manifest)
    if not manifest.is_file():
        raise DatasetLayoutError("Missing manifest file", str(manifest))
    base = manifest.parent
    entries: List[_Entry] = []
    with open(manifest, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                split = record["split"]
                label = int(record.get("label", 0))
                image_path = base / record["path"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetLayoutError(
                    f"Invalid manifest record on line {line_no} ({e})", str(manifest)
                ) from e
            if split != spec.split:
                continue
            if not image_path.is_file():
                raise DatasetLayoutError("Missing image listed in manifest", str(image_path))
            mask_path = record.get("mask_path")
            if label == 1:
                if not mask_path:
                    raise DatasetLayoutError(
                        f"Anomalous manifest entry on line {line_no} has no mask_path",
                        str(image_path),
                    )
                mask_path = base / mask_path
                if not mask_path.is_file():
                    raise DatasetLayoutError("Missing mask listed in manifest", str(mask_path))
            else:
                mask_path = None
            entries.append(_Entry(image_path, label, mask_path, record.get("defect", "")))
    return sorted(entries, key=lambda e: str(e.image_path))


class CategoryDataset(Dataset):
    """Read-only, lexicographically ordered split of one category."""

    def __init__(self, spec: DatasetSpec) -> None:
        """Resolve every file of the split.

        Args:
            spec: Dataset location, category, size and split

        Raises:
            DatasetLayoutError: Missing folder, mask or manifest entry
        """
        self.spec = spec
        self._entries = _scan_manifest(spec) if spec.manifest else _scan_folder(spec)
        logger.info(
            f"Loaded {spec.split} split of '{spec.category}': {len(self._entries)} images"
        )

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, index: int) -> Sample:
        entry = self._entries[index]
        size = self.spec.image_size
        image = resize(read_image(entry.image_path), size)
        if entry.mask_path is None:
            mask = torch.zeros(1, size, size)
        else:
            mask = resize(read_mask(entry.mask_path), size, is_mask=True)
            if entry.label == 1 and mask.sum() == 0:
                raise DatasetLayoutError(
                    f"Mask of anomalous image is empty at {size}x{size}", str(entry.mask_path)
                )
        return Sample(image, entry.label, mask)

    @property
    def paths(self) -> List[Path]:
        """Image paths in item order."""
        return [e.image_path for e in self._entries]

    @property
    def labels(self) -> List[int]:
        """Labels in item order."""
        return [e.label for e in self._entries]

    @property
    def defect_types(self) -> List[str]:
        """Defect folder names in item order."""
        return [e.defect_type for e in self._entries]


def load_split(spec: DatasetSpec) -> CategoryDataset:
    """Load one split of a category.

    Args:
        spec: Dataset location, category, image size and split

    Returns:
        Sequence of (image, label, mask) samples; test items list "good" first,
        then each defect folder, files in lexicographic order
    """
    return CategoryDataset(spec)


def stack_samples(samples: Sequence[Sample]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack samples into image, label and mask batches."""
    images = torch.stack([s.image for s in samples])
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    masks = torch.stack([s.mask for s in samples])
    return images, labels, masks
