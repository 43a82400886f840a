"""Configuration management module for the anomaly detection toolkit.

Typed sections (dataclasses) describe one run; :class:`Config` is the file layer
that merges a JSON or YAML file over the defaults and hands out a validated
:class:`RunConfig`.
"""

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml

from .exceptions import ConfigurationError
from .logger import logger

SPLITS = ("train", "test")
NOISE_NORMALIZATIONS = ("minmax", "affine")
GII_MODES = ("attention", "skip", "off")
MASK_POOLINGS = ("area", "max")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


@dataclass
class DatasetSpec:
    """Where a category lives and how its images are sized."""

    root_path: str = "datasets/mvtec"
    category: str = "carpet"
    image_size: int = 256
    split: str = "train"
    manifest: Optional[str] = None

    def __post_init__(self) -> None:
        if self.image_size <= 0:
            raise ConfigurationError(
                f"image_size must be positive, got {self.image_size}", "data.image_size"
            )
        if self.split not in SPLITS:
            raise ConfigurationError(
                f"split must be one of {SPLITS}, got '{self.split}'", "data.split"
            )

    def with_split(self, split: str) -> "DatasetSpec":
        """Copy of this spec pointing at another split."""
        return dataclasses.replace(self, split=split)


@dataclass
class SynthesisConfig:
    """Perlin-mask and texture-overlay anomaly synthesis settings."""

    beta_range: Tuple[float, float] = (0.15, 1.0)
    perlin_min_exponent: int = 1
    perlin_max_exponent: int = 5
    binarize_threshold: float = 0.5
    noise_normalization: str = "minmax"
    rotation_range: Tuple[float, float] = (-90.0, 90.0)
    use_foreground_mask: bool = False
    foreground_threshold: float = 0.5
    texture_source: str = "datasets/dtd/images"
    augment_texture: bool = True
    max_resample: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        low, high = self.beta_range
        if not 0.0 <= low <= high <= 1.0:
            raise ConfigurationError(
                f"beta_range must lie within [0, 1], got {self.beta_range}",
                "synthesis.beta_range",
            )
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigurationError(
                f"binarize_threshold must be in (0, 1), got {self.binarize_threshold}",
                "synthesis.binarize_threshold",
            )
        if not 0 <= self.perlin_min_exponent <= self.perlin_max_exponent:
            raise ConfigurationError(
                "perlin exponents must satisfy 0 <= min <= max",
                "synthesis.perlin_min_exponent",
            )
        if self.noise_normalization not in NOISE_NORMALIZATIONS:
            raise ConfigurationError(
                f"noise_normalization must be one of {NOISE_NORMALIZATIONS}",
                "synthesis.noise_normalization",
            )
        if not 0.0 <= self.foreground_threshold <= 1.0:
            raise ConfigurationError(
                "foreground_threshold must be in [0, 1]",
                "synthesis.foreground_threshold",
            )
        if self.max_resample < 0:
            raise ConfigurationError(
                "max_resample must be non-negative", "synthesis.max_resample"
            )


@dataclass
class ModelConfig:
    """Encoder choice and decoder wiring."""

    architecture: str = "wide_resnet50_2"
    # "imagenet" resolves through the weights registry, "none" skips loading,
    # anything else is a local file path.
    pretrained_weights: str = "imagenet"
    teacher_norm_eval: bool = False
    gii_mode: str = "attention"
    gii_activation: bool = False

    def __post_init__(self) -> None:
        if self.gii_mode not in GII_MODES:
            raise ConfigurationError(
                f"gii_mode must be one of {GII_MODES}, got '{self.gii_mode}'",
                "model.gii_mode",
            )


@dataclass
class TrainConfig:
    """Dual-optimizer training loop settings."""

    batch_size: int = 16
    max_iterations: int = 10000
    teacher_lr: float = 1e-4
    student_lr: float = 5e-3
    adam_betas: Tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 0
    early_stop_patience: int = 0
    validation_manifest: Optional[str] = None
    image_size: int = 256
    mask_pooling: str = "area"
    use_expert: bool = True
    update_teacher: bool = True
    update_student: bool = True
    device: str = "auto"

    def __post_init__(self) -> None:
        if self.teacher_lr <= 0 or self.student_lr <= 0:
            raise ConfigurationError("learning rates must be positive", "train.teacher_lr")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1", "train.batch_size")
        if self.max_iterations < 0:
            raise ConfigurationError(
                "max_iterations must be non-negative", "train.max_iterations"
            )
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ConfigurationError(
                "checkpoint_every and eval_every must be non-negative",
                "train.checkpoint_every",
            )
        if self.mask_pooling not in MASK_POOLINGS:
            raise ConfigurationError(
                f"mask_pooling must be one of {MASK_POOLINGS}", "train.mask_pooling"
            )


@dataclass
class EvalConfig:
    """Inference and metric settings."""

    sigma: float = 4.0
    fpr_limit: float = 0.3
    pro_max_thresholds: int = 5000
    batch_size: int = 8
    heatmaps: Optional[str] = None

    def __post_init__(self) -> None:
        if not 0.0 < self.fpr_limit <= 1.0:
            raise ConfigurationError("fpr_limit must be in (0, 1]", "eval.fpr_limit")
        if self.sigma < 0:
            raise ConfigurationError("sigma must be non-negative", "eval.sigma")


@dataclass
class LoggingConfig:
    """Console verbosity."""

    level: str = "INFO"

    def __post_init__(self) -> None:
        if str(self.level).upper() not in LOG_LEVELS:
            raise ConfigurationError(
                f"logging level must be one of {', '.join(LOG_LEVELS)}, got '{self.level}'",
                "logging.level",
            )


@dataclass
class RunConfig:
    """Everything one command needs, serializable as nested sections."""

    data: DatasetSpec = field(default_factory=DatasetSpec)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def to_dict(self) -> Dict[str, Any]:
        """Nested plain-dict form (tuples become lists)."""
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "RunConfig":
        """Build a run config, rejecting every unknown key at once.

        Args:
            values: Nested dictionary, possibly partial

        Returns:
            Fully populated run config

        Raises:
            ConfigurationError: Unknown keys or invalid values
        """
        offenders = unknown_keys(values)
        if offenders:
            raise ConfigurationError(
                "Unknown configuration keys: " + ", ".join(offenders),
                invalid_keys=offenders,
            )
        sections = {}
        for section in dataclasses.fields(cls):
            section_type = section.default_factory
            raw = values.get(section.name, {}) or {}
            kwargs = {}
            for item in dataclasses.fields(section_type):
                if item.name not in raw:
                    continue
                value = raw[item.name]
                default = section_type().__dict__[item.name]
                if isinstance(default, tuple) and isinstance(value, (list, tuple)):
                    value = tuple(value)
                kwargs[item.name] = value
            sections[section.name] = section_type(**kwargs)
        return cls(**sections)


def unknown_keys(values: Dict[str, Any]) -> List[str]:
    """List dotted keys in ``values`` that no config section defines."""
    known = RunConfig().to_dict()
    offenders = []
    for section, body in values.items():
        if section not in known:
            offenders.append(section)
            continue
        if not isinstance(body, dict):
            offenders.append(section)
            continue
        offenders.extend(f"{section}.{key}" for key in body if key not in known[section])
    return sorted(offenders)


class Config:
    """Configuration manager with file-based settings storage."""

    def __init__(self, config_file: Optional[Union[str, Path]] = None) -> None:
        """Initialize configuration manager.

        Args:
            config_file: Optional JSON or YAML file merged over the defaults

        Raises:
            ConfigurationError: If the file is missing or cannot be parsed
        """
        self.config_file = Path(config_file) if config_file else None
        self._config: Dict[str, Any] = self._load_default_config()
        if self.config_file is not None:
            self._load_config()

    def _load_default_config(self) -> Dict[str, Any]:
        """Load default configuration values.

        Returns:
            Dictionary containing default configuration
        """
        return RunConfig().to_dict()

    def _load_config(self) -> None:
        """Load configuration from file."""
        if not self.config_file.exists():
            raise ConfigurationError(f"Configuration file not found: {self.config_file}")
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                if self.config_file.suffix.lower() in (".yaml", ".yml"):
                    file_config = yaml.safe_load(f) or {}
                else:
                    file_config = json.load(f)
        except (json.JSONDecodeError, yaml.YAMLError, OSError) as e:
            logger.error(f"Error loading configuration: {e}")
            raise ConfigurationError(
                f"Cannot parse configuration file {self.config_file}: {e}"
            ) from e
        if not isinstance(file_config, dict):
            raise ConfigurationError(
                f"Configuration file {self.config_file} must contain a mapping"
            )
        self._merge_config(self._config, file_config)
        logger.info(f"Configuration loaded from {self.config_file}")

    def _merge_config(self, default: Dict[str, Any], override: Dict[str, Any]) -> None:
        """Recursively merge configuration dictionaries.

        Args:
            default: Default configuration dictionary to update
            override: Override values from file
        """
        for key, value in override.items():
            if (
                key in default
                and isinstance(default[key], dict)
                and isinstance(value, dict)
            ):
                self._merge_config(default[key], value)
            else:
                default[key] = value

    def save_config(self, path: Union[str, Path]) -> Path:
        """Write the resolved configuration as JSON.

        Args:
            path: Destination file

        Returns:
            The written path
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self._config, f, indent=2, ensure_ascii=False, sort_keys=True)
        logger.info(f"Configuration saved to {path}")
        return path

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value using dot notation.

        Args:
            key: Configuration key (e.g., 'train.max_iterations')
            default: Default value if key not found

        Returns:
            Configuration value or default
        """
        try:
            value = self._config
            for part in key.split("."):
                value = value[part]
            return value
        except (KeyError, TypeError):
            logger.warning(
                f"Configuration key '{key}' not found, using default: {default}"
            )
            return default

    def set(self, key: str, value: Any) -> None:
        """Set configuration value using dot notation.

        Args:
            key: Configuration key (e.g., 'train.max_iterations')
            value: Value to set
        """
        config_part = self._config
        keys = key.split(".")
        for part in keys[:-1]:
            if not isinstance(config_part.get(part), dict):
                config_part[part] = {}
            config_part = config_part[part]
        config_part[keys[-1]] = value
        logger.debug(f"Configuration '{key}' set to: {value}")

    def get_section(self, section: str) -> Dict[str, Any]:
        """Get entire configuration section.

        Args:
            section: Section name

        Returns:
            Copy of the configuration section dictionary
        """
        return copy.deepcopy(self.get(section, {}))

    def validate(self) -> RunConfig:
        """Check every key and value.

        Returns:
            The typed run configuration

        Raises:
            ConfigurationError: Listing all unknown keys, or the first invalid value
        """
        run = RunConfig.from_dict(self._config)
        if run.train.image_size != run.data.image_size:
            raise ConfigurationError(
                "train.image_size and data.image_size must agree "
                f"({run.train.image_size} != {run.data.image_size})",
                "train.image_size",
            )
        return run

    @property
    def run_config(self) -> RunConfig:
        """Validated typed view of the current values."""
        return self.validate()

    @property
    def digest(self) -> str:
        """sha256 of the canonical JSON form, for provenance."""
        canonical = json.dumps(self._config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
