"""Tests for dataset loading."""

import json
import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
import torch
from PIL import Image

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from core.config import DatasetSpec
from core.data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    load_split,
    normalize,
    read_image,
    read_mask,
    resize,
    stack_samples,
)
from core.exceptions import DatasetLayoutError, ImageReadError
from tests.toy_data import CATEGORY, build_manifest, build_toy_dataset


class TestReadAndResize(unittest.TestCase):
    """Test decoding and resizing of single files."""

    def setUp(self):
        """Set up test environment."""
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        """Clean up test environment."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_read_image_range_and_shape(self):
        """RGB images decode to 3 x H x W floats in [0, 1]."""
        path = self.temp_dir / "a.png"
        Image.fromarray(np.full((5, 7, 3), 255, dtype=np.uint8)).save(path)
        img = read_image(path)
        self.assertEqual(tuple(img.shape), (3, 5, 7))
        self.assertTrue(torch.all(img == 1.0))

    def test_read_grey_image_as_rgb(self):
        """Single-channel images are expanded to three channels."""
        path = self.temp_dir / "g.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(path)
        self.assertEqual(read_image(path).shape[0], 3)

    def test_read_image_errors(self):
        """Unsupported suffixes and undecodable files raise ImageReadError."""
        bad = self.temp_dir / "a.png"
        bad.write_bytes(b"not an image")
        with self.assertRaises(ImageReadError):
            read_image(bad)
        with self.assertRaises(ImageReadError):
            read_image(self.temp_dir / "a.tiff")

    def test_read_mask_binarizes(self):
        """Any non-zero value is foreground."""
        path = self.temp_dir / "m.png"
        values = np.array([[0, 1], [128, 255]], dtype=np.uint8)
        Image.fromarray(values).save(path)
        mask = read_mask(path)
        self.assertEqual(tuple(mask.shape), (1, 2, 2))
        self.assertEqual(mask.flatten().tolist(), [0.0, 1.0, 1.0, 1.0])

    def test_read_mask_rejects_rgb(self):
        """Masks must be single-channel."""
        path = self.temp_dir / "m.png"
        Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(path)
        with self.assertRaises(ImageReadError):
            read_mask(path)

    def test_resize_identity_is_a_copy(self):
        """Resizing to the current size returns an equal, distinct tensor."""
        img = torch.rand(3, 8, 8)
        out = resize(img, 8)
        self.assertTrue(torch.equal(out, img))
        out[0, 0, 0] = 5.0
        self.assertNotEqual(img[0, 0, 0].item(), 5.0)

    def test_resize_mask_stays_binary(self):
        """Masks are thresholded back to {0, 1}."""
        mask = (torch.rand(1, 37, 37) > 0.5).float()
        out = resize(mask, 16, is_mask=True)
        self.assertEqual(tuple(out.shape), (1, 16, 16))
        self.assertTrue(set(out.unique().tolist()) <= {0.0, 1.0})

    def test_resize_checkerboard_averages_to_half(self):
        """Halving a one-pixel checkerboard gives 0.5 everywhere, borders included."""
        yy, xx = torch.meshgrid(torch.arange(8), torch.arange(8), indexing="ij")
        board = ((yy + xx) % 2).float().expand(3, 8, 8)
        out = resize(board, 4)
        self.assertEqual(tuple(out.shape), (3, 4, 4))
        self.assertTrue(torch.allclose(out, torch.full((3, 4, 4), 0.5), atol=1e-6))

    def test_resize_large_mask_keeps_square_area(self):
        """A 70 px square on a 700 px mask covers about (25.6 px)^2 at 256."""
        mask = torch.zeros(1, 700, 700)
        mask[:, 315:385, 315:385] = 1.0
        out = resize(mask, 256, is_mask=True)[0]
        area = out.sum().item()
        self.assertLess(abs(area - 25.6**2), 2 * 25.6 + 1)
        rows = int(out.any(dim=1).sum())
        cols = int(out.any(dim=0).sum())
        self.assertEqual(area, rows * cols)

    def test_resize_enlarges_bilinearly(self):
        """Upsampling keeps values in range and a constant image constant."""
        out = resize(torch.full((3, 5, 5), 0.25), 12)
        self.assertEqual(tuple(out.shape), (3, 12, 12))
        self.assertTrue(torch.allclose(out, torch.full((3, 12, 12), 0.25), atol=1e-6))

    def test_mask_empty_after_resize_is_layout_error(self):
        """An anomalous item whose mask vanishes at the working size is rejected."""
        category = self.temp_dir / "tiny"
        for folder in ("train/good", "test/dot", "ground_truth/dot"):
            (category / folder).mkdir(parents=True)
        image = np.zeros((96, 96, 3), dtype=np.uint8)
        Image.fromarray(image).save(category / "train" / "good" / "000.png")
        Image.fromarray(image).save(category / "test" / "dot" / "000.png")
        dot = np.zeros((96, 96), dtype=np.uint8)
        dot[40, 40] = 255
        Image.fromarray(dot).save(category / "ground_truth" / "dot" / "000_mask.png")
        spec = DatasetSpec(
            root_path=str(self.temp_dir), category="tiny", image_size=32, split="test"
        )
        dataset = load_split(spec)
        with self.assertRaises(DatasetLayoutError) as ctx:
            dataset[0]
        self.assertIn("000_mask.png", ctx.exception.message)

    def test_resize_rejects_bad_size(self):
        """Non-positive sizes raise ValueError."""
        with self.assertRaises(ValueError):
            resize(torch.rand(3, 4, 4), 0)

    def test_normalize(self):
        """Channel statistics are removed per channel."""
        batch = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1).expand(2, 3, 4, 4)
        self.assertTrue(torch.allclose(normalize(batch), torch.zeros(2, 3, 4, 4), atol=1e-6))
        ones = normalize(torch.ones(3, 2, 2))
        expected = (1 - torch.tensor(IMAGENET_MEAN)) / torch.tensor(IMAGENET_STD)
        self.assertTrue(torch.allclose(ones[:, 0, 0], expected))


class TestLoadSplit(unittest.TestCase):
    """Test the folder and manifest layouts."""

    @classmethod
    def setUpClass(cls):
        """Build one toy dataset for the class."""
        cls.temp_dir = Path(tempfile.mkdtemp())
        cls.root = build_toy_dataset(cls.temp_dir / "data", size=64)

    @classmethod
    def tearDownClass(cls):
        """Remove the toy dataset."""
        shutil.rmtree(cls.temp_dir, ignore_errors=True)

    def spec(self, split="train", **kwargs):
        """Dataset spec for the toy category."""
        return DatasetSpec(
            root_path=str(self.root), category=CATEGORY, image_size=32, split=split, **kwargs
        )

    def test_train_split(self):
        """Train items are normal with all-zero masks, in lexicographic order."""
        dataset = load_split(self.spec())
        self.assertEqual(len(dataset), 10)
        self.assertEqual([p.name for p in dataset.paths], sorted(p.name for p in dataset.paths))
        sample = dataset[0]
        self.assertEqual(tuple(sample.image.shape), (3, 32, 32))
        self.assertEqual(sample.label, 0)
        self.assertEqual(tuple(sample.mask.shape), (1, 32, 32))
        self.assertEqual(sample.mask.sum().item(), 0)

    def test_test_split_order(self):
        """good first, then defect folders in lexicographic order."""
        dataset = load_split(self.spec("test"))
        self.assertEqual(len(dataset), 4 + 3 + 3)
        self.assertEqual(dataset.defect_types, ["good"] * 4 + ["blob"] * 3 + ["square"] * 3)
        self.assertEqual(dataset.labels, [0] * 4 + [1] * 6)

    def test_anomalous_items_have_masks(self):
        """Anomalous masks are binary and non-empty."""
        dataset = load_split(self.spec("test"))
        sample = dataset[len(dataset) - 1]
        self.assertEqual(sample.label, 1)
        self.assertGreater(sample.mask.sum().item(), 0)
        self.assertTrue(set(sample.mask.unique().tolist()) <= {0.0, 1.0})

    def test_stack_samples(self):
        """Samples stack into batches."""
        dataset = load_split(self.spec("test"))
        images, labels, masks = stack_samples([dataset[0], dataset[9]])
        self.assertEqual(tuple(images.shape), (2, 3, 32, 32))
        self.assertEqual(labels.tolist(), [0, 1])
        self.assertEqual(tuple(masks.shape), (2, 1, 32, 32))

    def test_missing_category(self):
        """A missing folder is a layout error naming the path."""
        with self.assertRaises(DatasetLayoutError) as ctx:
            load_split(DatasetSpec(root_path=str(self.root), category="absent"))
        self.assertIn("absent", ctx.exception.message)

    def test_missing_mask(self):
        """An anomalous image without a mask is a layout error."""
        extra = self.root / CATEGORY / "test" / "square" / "zzz.png"
        shutil.copy(self.root / CATEGORY / "test" / "square" / "000.png", extra)
        try:
            with self.assertRaises(DatasetLayoutError):
                load_split(self.spec("test"))
        finally:
            extra.unlink()

    def test_manifest_matches_folder(self):
        """A manifest listing the same files yields the same items."""
        manifest = build_manifest(self.root)
        try:
            from_manifest = load_split(self.spec("test", manifest=str(manifest)))
            self.assertEqual(len(from_manifest), 10)
            self.assertEqual(sorted(from_manifest.labels), [0] * 4 + [1] * 6)
            self.assertEqual(len(load_split(self.spec("train", manifest=str(manifest)))), 10)
        finally:
            manifest.unlink()

    def test_manifest_errors(self):
        """Broken records and anomalous entries without masks are rejected."""
        manifest = self.root / "bad.jsonl"
        try:
            manifest.write_text("{not json}\n", encoding="utf-8")
            with self.assertRaises(DatasetLayoutError):
                load_split(self.spec("test", manifest=str(manifest)))
            image = f"{CATEGORY}/test/square/000.png"
            manifest.write_text(
                json.dumps({"path": image, "split": "test", "label": 1}) + "\n", encoding="utf-8"
            )
            with self.assertRaises(DatasetLayoutError):
                load_split(self.spec("test", manifest=str(manifest)))
        finally:
            manifest.unlink()

    @patch("core.data.logger")
    def test_logs_split_size(self, mock_logger):
        """Loading logs the number of images."""
        load_split(self.spec())
        mock_logger.info.assert_called()


if __name__ == "__main__":
    unittest.main()
