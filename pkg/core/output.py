"""
Output handlers for experiment artifacts: CSV tables, JSON summaries,
binary volumes and checkpoints, and the provenance manifest.
"""

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from core.checkpoint import save_checkpoint
from core.config import config
from core.engine import AdamState
from core.models import CustomJSONEncoder, DiceReport, ExperimentManifest, Subject, TrainLog
from core.networks import ModelParams
from core.volumes import AnyVolume, write_subject, write_volume

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"

PathLike = Union[str, Path]


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class ArtifactLedger:
    """Every file a command wrote, with its checksum."""

    def __init__(self):
        self.outputs: List[Path] = []
        self.checksums: Dict[str, str] = {}

    def add(self, path: Path) -> str:
        checksum = sha256_file(path)
        if path not in self.outputs:
            self.outputs.append(path)
        self.checksums[str(path)] = checksum
        return checksum

    def verify(self) -> List[str]:
        """Problems found when re-checking the recorded files (empty when all is well)."""
        problems = []
        for path in self.outputs:
            if not path.exists():
                problems.append(f"missing output {path}")
            elif sha256_file(path) != self.checksums[str(path)]:
                problems.append(f"checksum mismatch for {path}")
        return problems


class OutputHandler:
    """Base class for output handlers."""

    def __init__(self, ledger: ArtifactLedger, operations_log: Optional[Path] = None):
        self.ledger = ledger
        self.operations_log = operations_log

    def _log_file_operation(self, operation: str, filepath: Path, success: bool,
                            size: Optional[int] = None, checksum: Optional[str] = None):
        """Log file operations for monitoring."""
        log_entry = {
            "operation": operation,
            "filepath": str(filepath),
            "success": success
        }
        if size is not None:
            log_entry["size_bytes"] = size
        if checksum is not None:
            log_entry["sha256"] = checksum

        logger.info(f"File operation: {json.dumps(log_entry)}")

        if self.operations_log is not None:
            try:
                with open(self.operations_log, 'a', encoding='utf-8') as f:
                    f.write(json.dumps(log_entry) + '\n')
            except OSError as e:
                logger.error(f"Failed to write to file operations log: {e}")

    def _written(self, filepath: Path) -> Path:
        checksum = self.ledger.add(filepath)
        self._log_file_operation("write", filepath, True, filepath.stat().st_size, checksum)
        return filepath

    def _failed(self, filepath: Path, error: Exception):
        logger.error(f"Failed to write {filepath}: {error}")
        self._log_file_operation("write", filepath, False)


class CSVOutputHandler(OutputHandler):
    """Tables as comma-separated text with a header row."""

    def save_frame(self, frame: pd.DataFrame, filepath: Path) -> Path:
        try:
            filepath.parent.mkdir(parents=True, exist_ok=True)
            frame.to_csv(filepath, index=False, lineterminator="\n")
        except OSError as e:
            self._failed(filepath, e)
            raise
        return self._written(filepath)

    def save_train_log(self, log: TrainLog, filepath: Path) -> Path:
        return self.save_frame(log.to_frame(), filepath)

    def save_dice_rows(self, report: DiceReport, filepath: Path) -> Path:
        return self.save_frame(report.to_frame(), filepath)


class JSONOutputHandler(OutputHandler):
    """Summaries and manifests."""

    def save(self, data: Dict[str, Any], filepath: Path, record: bool = True) -> Path:
        try:
            filepath.parent.mkdir(parents=True, exist_ok=True)
            with open(filepath, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=2, cls=CustomJSONEncoder, ensure_ascii=False)
                f.write("\n")
        except OSError as e:
            self._failed(filepath, e)
            raise
        if record:
            return self._written(filepath)
        self._log_file_operation("write", filepath, True, filepath.stat().st_size)
        return filepath


class BinaryOutputHandler(OutputHandler):
    """Volumes, subject directories and checkpoints."""

    def save_volume(self, volume: AnyVolume, filepath: Path) -> Path:
        try:
            write_volume(filepath, volume)
        except OSError as e:
            self._failed(filepath, e)
            raise
        return self._written(filepath)

    def save_subject(self, subject: Subject, directory: Path) -> List[Path]:
        try:
            written = write_subject(directory, subject)
        except OSError as e:
            self._failed(directory, e)
            raise
        return [self._written(p) for p in written]

    def save_checkpoint(self, params: ModelParams, filepath: Path,
                        state: Optional[AdamState] = None) -> Path:
        try:
            save_checkpoint(filepath, params, state)
        except OSError as e:
            self._failed(filepath, e)
            raise
        return self._written(filepath)


class OutputPipeline:
    """Artifact writers sharing one ledger, plus the manifest that describes them."""

    def __init__(self, command: str, seed: Optional[int] = None, operations_log: Optional[Path] = None):
        self.command = command
        self.seed = seed
        self.ledger = ArtifactLedger()
        self.csv = CSVOutputHandler(self.ledger, operations_log)
        self.json = JSONOutputHandler(self.ledger, operations_log)
        self.binary = BinaryOutputHandler(self.ledger, operations_log)
        self.inputs: List[str] = []
        self.notes: Dict[str, Any] = {}
        self.config_snapshot: Dict[str, Any] = {}
        self._started = time.perf_counter()

    def add_inputs(self, paths: Sequence[PathLike]):
        self.inputs.extend(str(p) for p in paths)

    def save_dice_report(self, report: DiceReport, csv_path: Path,
                         summary_path: Optional[Path] = None) -> List[Path]:
        """Rows as CSV and the {task, mean, std, n_subjects} summary as JSON."""
        summary_path = summary_path or csv_path.with_suffix(".json")
        return [self.csv.save_dice_rows(report, csv_path), self.json.save(report.to_summary(), summary_path)]

    def manifest(self) -> ExperimentManifest:
        wall = round(time.perf_counter() - self._started, 3) if config.runtime.record_wall_time else None
        return ExperimentManifest(
            command=self.command,
            seed=self.seed,
            config=self.config_snapshot,
            inputs=list(self.inputs),
            outputs=[str(p) for p in self.ledger.outputs],
            checksums=dict(self.ledger.checksums),
            wall_time_s=wall,
            notes=dict(self.notes),
        )

    def finalize(self, directory: Path, filename: str = MANIFEST_FILE) -> Path:
        """Verify every recorded output, then write the manifest next to them."""
        problems = self.ledger.verify()
        if problems:
            for problem in problems:
                logger.error(problem)
            raise OSError(f"{len(problems)} declared outputs failed verification")
        return self.json.save(self.manifest().to_dict(), directory / filename, record=False)
