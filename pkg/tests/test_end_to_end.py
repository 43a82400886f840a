"""Toy-scale training runs: a striped category learned from scratch on CPU.

These take minutes; deselect them with ``pytest -m "not slow"``.
"""

import json
import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from core.data import load_split
from core.scoring import evaluate
from core.trainer import LAST_CHECKPOINT, TRAIN_LOG, fit, load_checkpoint
from tests.toy_data import build_textures, build_toy_dataset, toy_config, toy_workspace

SIZE = 128


@pytest.mark.slow
@pytest.mark.timeout(1800)
class TestEndToEnd(unittest.TestCase):
    """Train on 20 striped images, then score injected squares and blobs."""

    @classmethod
    def setUpClass(cls):
        """Toy category with eight defective test images."""
        cls.temp_dir = Path(tempfile.mkdtemp())
        cls.root = build_toy_dataset(
            cls.temp_dir / "data", size=SIZE, n_train=20, n_good_test=6, n_per_defect=4
        )
        cls.textures = build_textures(cls.temp_dir / "textures", count=6, size=64)

    @classmethod
    def tearDownClass(cls):
        """Remove the workspace."""
        shutil.rmtree(cls.temp_dir, ignore_errors=True)

    def setUp(self):
        """Quiet the training and scoring loggers."""
        for target in ("core.trainer.logger", "core.scoring.logger"):
            patcher = patch(target)
            patcher.start()
            self.addCleanup(patcher.stop)

    def _train(self, name, **overrides):
        config = toy_config(self.root, self.textures, size=SIZE, **overrides)
        path = fit(config, load_split(config.data), self.temp_dir / name)
        return config, load_checkpoint(path, expected_architecture="wide_resnet_tiny")

    def test_detects_injected_defects(self):
        """500 iterations separate defects from stripes at image and pixel level."""
        config, state = self._train("full", max_iterations=500)
        self.assertEqual(state.iteration, 500)
        test_set = load_split(config.data.with_split("test"))
        report = evaluate(state.teacher, state.student, test_set, config.eval)
        self.assertEqual(report.n_images, 14)
        self.assertGreaterEqual(report.p_auc, 0.90)
        self.assertGreaterEqual(report.i_auc, 0.90)

    def test_without_injection_runs_to_completion(self):
        """The student without guided injection trains and scores end to end."""
        config, state = self._train("no_gii", max_iterations=50, gii_mode="off")
        self.assertIsNone(state.student.gii)
        self.assertTrue((self.temp_dir / "no_gii" / LAST_CHECKPOINT).is_file())
        report = evaluate(
            state.teacher, state.student, load_split(config.data.with_split("test")), config.eval
        )
        for value in report.metrics().values():
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, 1.0)


@pytest.mark.slow
@pytest.mark.timeout(900)
class TestStudentLossDecrease(unittest.TestCase):
    """Short training on ten striped images."""

    def setUp(self):
        """Toy workspace and a quiet trainer."""
        self.temp_dir = Path(tempfile.mkdtemp())
        self.root, self.textures = toy_workspace(self.temp_dir, size=64)
        patcher = patch("core.trainer.logger")
        patcher.start()
        self.addCleanup(patcher.stop)

    def tearDown(self):
        """Remove the workspace."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_student_loss_halves_in_200_steps(self):
        """The student loss ends at most half its first value."""
        config = toy_config(self.root, self.textures, max_iterations=200)
        dataset = load_split(config.data)
        self.assertEqual(len(dataset), 10)
        fit(config, dataset, self.temp_dir / "run")
        lines = (self.temp_dir / "run" / TRAIN_LOG).read_text(encoding="utf-8").splitlines()
        losses = [json.loads(line)["loss_s"] for line in lines]
        self.assertEqual(len(losses), 200)
        self.assertLessEqual(float(np.mean(losses[-10:])), 0.5 * losses[0])


if __name__ == "__main__":
    unittest.main()
