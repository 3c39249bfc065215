"""
Configuration management for the partial-to-full segmentation transfer pipeline
"""

import json
import os
from dataclasses import asdict, field
from dataclasses import dataclass as std_dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv
from pydantic import ConfigDict, TypeAdapter
from pydantic.dataclasses import dataclass

from core.exceptions import ConfigError

# Load environment variables
load_dotenv()

_STRICT = ConfigDict(extra="forbid")


@dataclass(config=_STRICT)
class ArchConfig:
    """Architecture of the stage-1 U-Net and the stage-2 dual-decoder network.

    The class-count defaults match the default phantom: P=3 partial and K=6
    full structures, each plus background. See ``whole_brain`` for the
    full-size setting.
    """
    base_channels: int = 8
    depth: int = 3
    kernel_size: int = 3
    num_partial_classes: int = 4
    num_full_classes: int = 7

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.num_partial_classes < 2:
            raise ConfigError(f"num_partial_classes must be >= 2, got {self.num_partial_classes}")
        if self.num_full_classes < 2:
            raise ConfigError(f"num_full_classes must be >= 2, got {self.num_full_classes}")

    @property
    def divisor(self) -> int:
        """Patch extents must be multiples of this."""
        return 2 ** self.depth

    def channels(self, level: int) -> int:
        """Feature width at a resolution level (level == depth is the bottleneck)."""
        return self.base_channels * 2 ** level

    def same_trunk(self, other: "ArchConfig") -> bool:
        return (self.base_channels, self.depth, self.kernel_size) == (
            other.base_channels, other.depth, other.kernel_size)

    @classmethod
    def whole_brain(cls) -> "ArchConfig":
        """15 sub-cortical structures + background, 138 structures + background."""
        return cls(base_channels=16, depth=4, num_partial_classes=16, num_full_classes=139)


@dataclass(config=_STRICT)
class TrainConfig:
    """Hyperparameters shared by both training stages."""
    patch_size: int = 32
    lr: float = 0.001
    lambda_s: float = 0.5
    lambda_w: float = 0.5
    pretrain_epochs: int = 3
    joint_epochs: int = 200
    steps_per_epoch: Optional[int] = None
    seed: int = 0
    augment: bool = True
    augment_magnitude: float = 2.0
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.5
    validation_fraction: float = 0.0
    early_stopping_patience: int = 0
    prefetch_workers: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_w < 0:
            raise ConfigError(f"loss weights must be >= 0, got lambda_s={self.lambda_s}, lambda_w={self.lambda_w}")
        if self.patch_size < 1 or self.patch_size % self.arch.divisor:
            raise ConfigError(
                f"patch_size {self.patch_size} is not divisible by 2^depth = {self.arch.divisor}")
        if self.pretrain_epochs < 0 or self.joint_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError(f"steps_per_epoch must be >= 1 when set, got {self.steps_per_epoch}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.augment_magnitude < 0:
            raise ConfigError(f"augment_magnitude must be >= 0, got {self.augment_magnitude}")
        if self.lr_decay_every < 0 or not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_every must be >= 0 and lr_decay_factor in (0, 1]")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        if self.early_stopping_patience < 0 or self.prefetch_workers < 0:
            raise ConfigError("early_stopping_patience and prefetch_workers must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return asdict(self)


_TRAIN_CONFIG_ADAPTER = TypeAdapter(TrainConfig)


def parse_train_config(document: Dict[str, Any]) -> TrainConfig:
    """Validate a JSON-like mapping, naming every unknown or malformed key."""
    if not isinstance(document, dict):
        raise ConfigError("configuration document must be a JSON object")
    try:
        return _TRAIN_CONFIG_ADAPTER.validate_python(document)
    except ConfigError:
        raise
    except ValueError as e:
        errors = getattr(e, "errors", None)
        if callable(errors):
            problems = [
                f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
                for err in errors()
            ]
            raise ConfigError("invalid configuration: " + "; ".join(problems)) from e
        raise ConfigError(f"invalid configuration: {e}") from e


def load_train_config(path: Union[str, Path, None]) -> TrainConfig:
    """Read a TrainConfig JSON document; ``None`` gives the defaults."""
    if path is None:
        return TrainConfig()
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return parse_train_config(document)


@std_dataclass
class RuntimeConfig:
    """Process-level settings taken from the environment."""
    threads: int = 1
    log_level: str = "INFO"
    debug_validation: bool = False
    record_wall_time: bool = False
    output_dir: Path = Path("runs")


def _env_flag(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


class Config:
    """Main configuration class."""

    def __init__(self):
        self.runtime = RuntimeConfig()
        self._load_from_env()

    def _load_from_env(self):
        """Load configuration from environment variables."""
        threads = os.getenv("MSEG_THREADS", "")
        try:
            self.runtime.threads = max(1, int(threads)) if threads else (os.cpu_count() or 1)
        except ValueError:
            raise ConfigError(f"MSEG_THREADS must be an integer, got {threads!r}")

        self.runtime.log_level = os.getenv("MSEG_LOG_LEVEL", "INFO").upper()
        self.runtime.debug_validation = _env_flag("MSEG_DEBUG_VALIDATION")
        self.runtime.record_wall_time = _env_flag("MSEG_RECORD_WALL_TIME")
        self.runtime.output_dir = Path(os.getenv("MSEG_OUTPUT_DIR", "runs"))


# Global configuration instance
config = Config()
