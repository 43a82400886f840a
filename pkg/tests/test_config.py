"""Tests for configuration management module."""

import json
import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import yaml

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from core.config import (
    Config,
    DatasetSpec,
    EvalConfig,
    LoggingConfig,
    ModelConfig,
    RunConfig,
    SynthesisConfig,
    TrainConfig,
    unknown_keys,
)
from core.exceptions import ConfigurationError


class TestSections(unittest.TestCase):
    """Test the typed configuration sections."""

    def test_defaults(self):
        """Defaults carry the published training settings."""
        run = RunConfig()
        self.assertEqual(run.data.image_size, 256)
        self.assertEqual(run.train.batch_size, 16)
        self.assertEqual(run.train.max_iterations, 10000)
        self.assertEqual(run.train.teacher_lr, 1e-4)
        self.assertEqual(run.train.student_lr, 5e-3)
        self.assertEqual(run.train.adam_betas, (0.5, 0.999))
        self.assertEqual(run.synthesis.beta_range, (0.15, 1.0))
        self.assertEqual(run.eval.sigma, 4.0)
        self.assertEqual(run.eval.fpr_limit, 0.3)
        self.assertEqual(run.model.gii_mode, "attention")

    def test_invalid_values(self):
        """Each section rejects out-of-range values."""
        cases = [
            lambda: DatasetSpec(image_size=0),
            lambda: DatasetSpec(split="validation"),
            lambda: SynthesisConfig(beta_range=(0.5, 1.5)),
            lambda: SynthesisConfig(binarize_threshold=1.0),
            lambda: SynthesisConfig(perlin_min_exponent=3, perlin_max_exponent=2),
            lambda: SynthesisConfig(noise_normalization="zscore"),
            lambda: ModelConfig(gii_mode="concat"),
            lambda: TrainConfig(teacher_lr=0.0),
            lambda: TrainConfig(batch_size=0),
            lambda: TrainConfig(mask_pooling="nearest"),
            lambda: EvalConfig(fpr_limit=0.0),
            lambda: EvalConfig(fpr_limit=1.5),
            lambda: LoggingConfig(level="verbose"),
        ]
        for make in cases:
            with self.assertRaises(ConfigurationError):
                make()

    def test_with_split(self):
        """with_split copies everything but the split."""
        spec = DatasetSpec(root_path="/data", category="grid", image_size=128)
        test = spec.with_split("test")
        self.assertEqual(test.split, "test")
        self.assertEqual(test.category, "grid")
        self.assertEqual(spec.split, "train")

    def test_round_trip(self):
        """A run config survives to_dict/from_dict unchanged."""
        run = RunConfig(
            train=TrainConfig(max_iterations=12, adam_betas=(0.9, 0.99)),
            model=ModelConfig(gii_mode="skip"),
        )
        self.assertEqual(RunConfig.from_dict(run.to_dict()), run)
        self.assertEqual(RunConfig.from_dict(json.loads(json.dumps(run.to_dict()))), run)

    def test_unknown_keys_listed_together(self):
        """Every unknown key is reported in one error."""
        values = {"train": {"max_iters": 5, "lr": 1}, "extra": {}}
        self.assertEqual(unknown_keys(values), ["extra", "train.lr", "train.max_iters"])
        with self.assertRaises(ConfigurationError) as ctx:
            RunConfig.from_dict(values)
        self.assertEqual(ctx.exception.invalid_keys, ["extra", "train.lr", "train.max_iters"])


class TestConfig(unittest.TestCase):
    """Test Configuration manager."""

    def setUp(self):
        """Set up test environment."""
        self.temp_dir = tempfile.mkdtemp()
        self.config_file = Path(self.temp_dir) / "run.json"

        # Mock the logger to avoid logging issues during tests
        self.logger_patcher = patch("core.config.logger")
        self.mock_logger = self.logger_patcher.start()

    def tearDown(self):
        """Clean up test environment."""
        self.logger_patcher.stop()
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_init_with_defaults(self):
        """Without a file the defaults are used."""
        config = Config()
        self.assertEqual(config.get("train.max_iterations"), 10000)
        self.assertEqual(config.run_config, RunConfig())

    def test_json_file_merged_over_defaults(self):
        """File values win, unspecified keys keep their defaults."""
        with open(self.config_file, "w", encoding="utf-8") as f:
            json.dump({"train": {"max_iterations": 50}, "data": {"category": "grid"}}, f)
        config = Config(self.config_file)
        self.assertEqual(config.get("train.max_iterations"), 50)
        self.assertEqual(config.get("train.batch_size"), 16)
        self.assertEqual(config.get("data.category"), "grid")

    def test_yaml_file(self):
        """YAML files are read by suffix."""
        path = Path(self.temp_dir) / "run.yaml"
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump({"model": {"gii_mode": "off"}, "eval": {"sigma": 2.0}}, f)
        run = Config(path).validate()
        self.assertEqual(run.model.gii_mode, "off")
        self.assertEqual(run.eval.sigma, 2.0)

    def test_missing_file(self):
        """A named file that does not exist is an error."""
        with self.assertRaises(ConfigurationError):
            Config(Path(self.temp_dir) / "absent.json")

    def test_corrupted_file(self):
        """Unparsable files raise ConfigurationError and are logged."""
        with open(self.config_file, "w", encoding="utf-8") as f:
            f.write("{ invalid json }")
        with self.assertRaises(ConfigurationError):
            Config(self.config_file)
        self.mock_logger.error.assert_called()

    def test_non_mapping_file(self):
        """A top-level list is rejected."""
        with open(self.config_file, "w", encoding="utf-8") as f:
            json.dump([1, 2, 3], f)
        with self.assertRaises(ConfigurationError):
            Config(self.config_file)

    def test_get_missing_key_returns_default(self):
        """Missing keys log a warning and fall back."""
        config = Config()
        self.assertEqual(config.get("train.nope", 7), 7)
        self.mock_logger.warning.assert_called()

    def test_set_with_dot_notation(self):
        """set creates intermediate sections as needed."""
        config = Config()
        config.set("train.seed", 3)
        config.set("new.section.key", "v")
        self.assertEqual(config.get("train.seed"), 3)
        self.assertEqual(config.get("new.section.key"), "v")

    def test_get_section_is_a_copy(self):
        """Mutating a returned section does not touch the config."""
        config = Config()
        section = config.get_section("synthesis")
        section["beta_range"][0] = 0.9
        self.assertEqual(config.get("synthesis.beta_range"), [0.15, 1.0])

    def test_validate_rejects_unknown_keys(self):
        """validate lists all unknown keys at once."""
        config = Config()
        config.set("train.lr", 1)
        config.set("bogus.key", 2)
        with self.assertRaises(ConfigurationError) as ctx:
            config.validate()
        self.assertEqual(ctx.exception.invalid_keys, ["bogus", "train.lr"])

    def test_validate_image_sizes_agree(self):
        """train.image_size must match data.image_size."""
        config = Config()
        config.set("data.image_size", 128)
        with self.assertRaises(ConfigurationError) as ctx:
            config.validate()
        self.assertEqual(ctx.exception.config_key, "train.image_size")

    def test_save_config_round_trip(self):
        """A saved config loads back to the same run config and digest."""
        config = Config()
        config.set("train.max_iterations", 5)
        saved = config.save_config(Path(self.temp_dir) / "out" / "config.json")
        reloaded = Config(saved)
        self.assertEqual(reloaded.validate(), config.validate())
        self.assertEqual(reloaded.digest, config.digest)

    def test_digest_changes_with_values(self):
        """Different values give different digests."""
        a, b = Config(), Config()
        self.assertEqual(a.digest, b.digest)
        b.set("train.seed", 1)
        self.assertNotEqual(a.digest, b.digest)


if __name__ == "__main__":
    unittest.main()
