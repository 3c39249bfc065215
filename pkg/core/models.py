"""
Data models for the segmentation transfer pipeline
"""

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from core.exceptions import LabelError, PhantomError, ShapeError

Spacing = Tuple[float, float, float]


class Stage(Enum):
    """Training stages."""
    PRETRAIN = "pretrain"
    JOINT = "joint"


class Head(Enum):
    """Decoder heads of the dual-decoder network."""
    PARTIAL = "w"
    FULL = "s"


class Task(Enum):
    """Segmentation tasks reported in Dice tables."""
    FULL = "full"
    PARTIAL = "partial"


@dataclass
class Volume:
    """3D intensity grid indexed (D, H, W) with W fastest."""
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"volume must be a non-empty 3D grid, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)


@dataclass
class LabelVolume:
    """3D grid of class ids; 0 is background."""
    data: np.ndarray
    num_classes: int
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"label volume must be a non-empty 3D grid, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            raise LabelError(f"label volume must hold integers, got {data.dtype}")
        if data.size and int(data.min()) < 0:
            raise LabelError("label volume holds negative ids")
        if self.num_classes < 1 or self.num_classes > 65536:
            raise LabelError(f"num_classes must be in [1, 65536], got {self.num_classes}")
        if data.size and int(data.max()) >= self.num_classes:
            raise LabelError(f"label id {int(data.max())} >= num_classes {self.num_classes}")
        self.data = np.ascontiguousarray(data, dtype=np.uint16)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def present_ids(self) -> List[int]:
        return [int(i) for i in np.unique(self.data)]


@dataclass
class LabelMap:
    """Maps full-annotation ids to partial ids 1..P; unmapped ids become background."""
    mapping: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.mapping = {int(k): int(v) for k, v in self.mapping.items()}
        if any(k < 1 for k in self.mapping):
            raise LabelError("full ids must be >= 1; background always maps to background")
        partial_ids = sorted(set(self.mapping.values()))
        if partial_ids != list(range(1, len(partial_ids) + 1)):
            raise LabelError(f"partial ids must form the contiguous range 1..P, got {partial_ids}")

    @property
    def num_partial(self) -> int:
        return len(set(self.mapping.values()))

    @property
    def num_classes(self) -> int:
        """Partial structures plus background."""
        return self.num_partial + 1

    @classmethod
    def from_pairs(cls, pairs: List[Tuple[int, int]]) -> "LabelMap":
        mapping: Dict[int, int] = {}
        for full_id, partial_id in pairs:
            if full_id in mapping:
                raise LabelError(f"full id {full_id} is mapped twice")
            mapping[full_id] = partial_id
        return cls(mapping)

    @classmethod
    def from_text(cls, text: str) -> "LabelMap":
        """Parse ``full_id partial_id`` lines; '#' starts a comment."""
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise LabelError(f"line {lineno}: expected 'full_id partial_id', got {raw!r}")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise LabelError(f"line {lineno}: ids must be integers, got {raw!r}")
        return cls.from_pairs(pairs)

    def to_text(self) -> str:
        lines = ["# full_id partial_id"]
        lines += [f"{k} {v}" for k, v in sorted(self.mapping.items())]
        return "\n".join(lines) + "\n"


@dataclass
class PhantomSpec:
    """Synthetic stand-in for a brain scan with nested structures.

    ``seed`` drives everything specific to one subject (placement, size
    jitter, noise). ``atlas_seed`` drives what a cohort shares (structure
    intensities, nominal radii, the partial label map); it defaults to
    ``seed`` for a standalone phantom.
    """
    size: int = 32
    num_structures: int = 6
    partial_size: int = 3
    noise_sigma: float = 0.05
    seed: int = 0
    atlas_seed: Optional[int] = None

    def __post_init__(self):
        if self.size < 8:
            raise PhantomError(f"phantom size must be >= 8, got {self.size}")
        if not self.num_structures >= self.partial_size >= 0:
            raise PhantomError(
                f"need K >= P >= 0, got K={self.num_structures}, P={self.partial_size}")
        if self.noise_sigma < 0:
            raise PhantomError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class Subject:
    """One training or evaluation case."""
    subject_id: str
    image: Volume
    labels: Optional[LabelVolume] = None
    partial: Optional[LabelVolume] = None
    label_map: Optional[LabelMap] = None


@dataclass
class TransferManifest:
    """Which stage-1 tensors were loaded into which stage-2 tensors."""
    copied: List[Tuple[str, str]] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return {
            'copied': [{'source': s, 'target': t} for s, t in self.copied],
            'skipped': list(self.skipped)
        }


@dataclass
class TrainRecord:
    """One optimizer step."""
    step: int
    stage: str
    loss_total: float
    loss_w: float
    loss_s: Optional[float] = None
    wall_ms: float = 0.0


@dataclass
class TrainLog:
    """Per-step records of one training stage."""
    records: List[TrainRecord] = field(default_factory=list)

    COLUMNS = ["step", "stage", "loss_total", "loss_w", "loss_s", "wall_ms"]

    def append(self, record: TrainRecord):
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(f"step {record.step} does not follow {self.records[-1].step}")
        self.records.append(record)

    def losses(self) -> List[float]:
        return [r.loss_total for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=self.COLUMNS)


@dataclass
class DiceRecord:
    """Dice of one structure in one subject."""
    subject: str
    structure: int
    dice: float


@dataclass
class DiceReport:
    """Per-structure Dice values with per-subject means and the cohort mean +- std."""
    task: Task
    rows: List[DiceRecord]
    group_means: Dict[str, float]
    mean: float
    std: float
    n_subjects: int
    across: str = "subjects"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=["subject", "structure", "dice"])

    def to_summary(self) -> Dict[str, Any]:
        return {
            'task': self.task.value,
            'mean': self.mean,
            'std': self.std,
            'n_subjects': self.n_subjects
        }

    def format_row(self, method: str) -> str:
        return f"{method:<16} {self.mean:.3f}±{self.std:.3f}"


@dataclass
class ExperimentManifest:
    """Provenance record written next to every command's outputs."""
    command: str
    seed: Optional[int]
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    checksums: Dict[str, str] = field(default_factory=dict)
    wall_time_s: Optional[float] = None
    notes: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return {
            'command': self.command,
            'seed': self.seed,
            'config': self.config,
            'inputs': self.inputs,
            'outputs': self.outputs,
            'checksums': self.checksums,
            'wall_time_s': self.wall_time_s,
            'notes': self.notes
        }


class RunState(Enum):
    """Lifecycle of a pipeline run."""
    IDLE = "idle"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class PipelineStatus:
    """Progress of an experiment pipeline."""
    state: RunState = RunState.IDLE
    stage: Optional[str] = None
    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None
    error_message: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        return {
            'state': self.state.value,
            'stage': self.stage,
            'start_time': self.start_time.isoformat() if self.start_time else None,
            'end_time': self.end_time.isoformat() if self.end_time else None,
            'error_message': self.error_message
        }


class CustomJSONEncoder(json.JSONEncoder):
    """Custom JSON encoder for enums, paths and numpy scalars."""
    def default(self, obj):
        if isinstance(obj, Enum):
            return obj.value
        if isinstance(obj, Path):
            return str(obj)
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            value = float(obj)
            return None if math.isnan(value) else value
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return super().default(obj)
