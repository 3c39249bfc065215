"""
Experiment orchestration: phantom cohorts, the two-stage run, held-out
evaluation and the three-way comparison of initialization strategies.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from core.config import TrainConfig
from core.data import extract_partial, phantom_subject, zscore_normalize
from core.evaluation import evaluate_cohort, summary_table, tile_infer
from core.exceptions import DataError
from core.models import DiceReport, Head, LabelVolume, PhantomSpec, PipelineStatus, RunState, Subject, Task
from core.networks import ModelParams
from core.output import OutputPipeline
from core.seeding import derive_seed
from core.training import TrainResult, joint_train, pretrain

logger = logging.getLogger(__name__)

SUBJECT_PREFIX = "subject"
METHOD_MONET = "mo-net"
METHOD_SCRATCH = "u-net-fs"
METHOD_FINETUNE = "u-net-ft"
METHODS = (METHOD_MONET, METHOD_SCRATCH, METHOD_FINETUNE)


@dataclass
class CohortSpec:
    """Phantom cohort sizes and geometry for an experiment."""
    pretrain_count: int = 40
    joint_count: int = 4
    heldout_count: int = 6
    size: int = 32
    num_structures: int = 6
    partial_size: int = 3
    noise_sigma: float = 0.05

    def phantom(self, seed: int, atlas_seed: int) -> PhantomSpec:
        return PhantomSpec(size=self.size, num_structures=self.num_structures,
                           partial_size=self.partial_size, noise_sigma=self.noise_sigma,
                           seed=seed, atlas_seed=atlas_seed)


def subject_name(index: int) -> str:
    return f"{SUBJECT_PREFIX}_{index:03d}"


def comparison_seeds(base_seed: int, count: int) -> List[int]:
    """Per-run seeds of a comparison, derived from one base seed."""
    if count < 0:
        raise ValueError(f"seed count must be >= 0, got {count}")
    return [derive_seed(base_seed, "compare", i) for i in range(count)]


def make_cohort(spec: CohortSpec, count: int, seed: int, cohort: str = "",
                partial_only: bool = False) -> List[Subject]:
    """``count`` phantoms sharing the atlas of ``seed``; phantom i uses sub-seed (seed, cohort, i)."""
    parts = (cohort,) if cohort else ()
    return [
        phantom_subject(subject_name(i), spec.phantom(derive_seed(seed, *parts, "phantom", i), seed),
                        partial_only=partial_only)
        for i in range(count)
    ]


def predict_cohort(params: ModelParams, subjects: Sequence[Subject], patch_size: int,
                   head: Head) -> Dict[str, LabelVolume]:
    """Tiled predictions on z-scored images, keyed by subject id."""
    return {s.subject_id: tile_infer(params, zscore_normalize(s.image), patch_size, head) for s in subjects}


def evaluate_params(params: ModelParams, subjects: Sequence[Subject], patch_size: int,
                    task: Task = Task.FULL, across: str = "subjects",
                    structures: Optional[Sequence[int]] = None) -> Tuple[DiceReport, Dict[str, LabelVolume]]:
    """Infer every subject with the task's head and score it against its labels."""
    head = Head.FULL if task is Task.FULL else Head.PARTIAL
    truths: Dict[str, LabelVolume] = {}
    for subject in subjects:
        if subject.labels is None:
            raise DataError(f"subject {subject.subject_id} has no full labels to evaluate against")
        if task is Task.FULL:
            truths[subject.subject_id] = subject.labels
        else:
            if subject.label_map is None:
                raise DataError(f"subject {subject.subject_id} has no label map for partial evaluation")
            truths[subject.subject_id] = extract_partial(subject.labels, subject.label_map)
    if structures is None:
        num_classes = max(t.num_classes for t in truths.values())
        structures = list(range(1, num_classes))
    predictions = predict_cohort(params, subjects, patch_size, head)
    return evaluate_cohort(predictions, truths, task, structures, across), predictions


@dataclass
class ExperimentResult:
    stage1: TrainResult
    stage2: TrainResult
    reports: Dict[Task, DiceReport] = field(default_factory=dict)


@dataclass
class ComparisonResult:
    """Held-out full-task Dice per (seed, method)."""
    reports: Dict[Tuple[int, str], DiceReport] = field(default_factory=dict)

    def table(self) -> pd.DataFrame:
        rows = [(seed, method, r.mean, r.std) for (seed, method), r in self.reports.items()]
        return pd.DataFrame(rows, columns=["seed", "method", "mean", "std"])

    def medians(self) -> Dict[str, float]:
        """Median over seeds of each method's held-out mean Dice, in METHODS order."""
        medians = self.table().groupby("method")["mean"].median()
        return {method: float(medians[method]) for method in METHODS if method in medians.index}

    def pretrained_beats_scratch(self) -> bool:
        medians = self.medians()
        return medians.get(METHOD_MONET, 0.0) > medians.get(METHOD_SCRATCH, 0.0)


class ExperimentPipeline:
    """Runs the two-stage scheme on phantom cohorts and writes its artifacts."""

    def __init__(self, cfg: TrainConfig, cohort: Optional[CohortSpec] = None):
        self.cfg = cfg
        self.cohort = cohort or CohortSpec()
        self.status = PipelineStatus()

    def _update_status(self, state: RunState, stage: Optional[str] = None,
                       error_message: Optional[str] = None):
        """Update pipeline status."""
        self.status.state = state
        self.status.stage = stage
        self.status.error_message = error_message
        if state is RunState.RUNNING and self.status.start_time is None:
            self.status.start_time = datetime.now()
        if state in (RunState.COMPLETED, RunState.FAILED):
            self.status.end_time = datetime.now()

    def get_status(self) -> PipelineStatus:
        """Get current pipeline status."""
        return self.status

    def _cohorts(self, seed: int) -> Tuple[List[Subject], List[Subject], List[Subject]]:
        c = self.cohort
        return (make_cohort(c, c.pretrain_count, seed, "pretrain", partial_only=True),
                make_cohort(c, c.joint_count, seed, "joint"),
                make_cohort(c, c.heldout_count, seed, "heldout"))

    def run_experiment(self, out_dir: Path, output: OutputPipeline) -> ExperimentResult:
        """Generate cohorts, pretrain, joint-train, then evaluate the held-out cohort on both tasks."""
        cfg = self.cfg
        self._update_status(RunState.RUNNING, "phantoms")
        try:
            pre_subjects, joint_subjects, heldout = self._cohorts(cfg.seed)
            for name, subjects in (("pretrain", pre_subjects), ("joint", joint_subjects), ("heldout", heldout)):
                for subject in subjects:
                    output.binary.save_subject(subject, out_dir / "data" / name / subject.subject_id)
            logger.info(f"Generated cohorts: {len(pre_subjects)} pretrain, {len(joint_subjects)} joint, "
                        f"{len(heldout)} held-out")

            self._update_status(RunState.RUNNING, "pretrain")
            stage1 = pretrain(pre_subjects, cfg)
            output.binary.save_checkpoint(stage1.params, out_dir / "stage1.ckpt", stage1.adam)
            output.csv.save_train_log(stage1.log, out_dir / "stage1_log.csv")

            self._update_status(RunState.RUNNING, "joint")
            stage2 = joint_train(joint_subjects, stage1.params, cfg, init_label=str(out_dir / "stage1.ckpt"))
            output.binary.save_checkpoint(stage2.params, out_dir / "stage2.ckpt", stage2.adam)
            output.csv.save_train_log(stage2.log, out_dir / "stage2_log.csv")
            output.json.save(stage2.manifest.to_dict(), out_dir / "transfer.json")

            self._update_status(RunState.RUNNING, "evaluate")
            result = ExperimentResult(stage1, stage2)
            if heldout:
                for task in (Task.FULL, Task.PARTIAL):
                    report, predictions = evaluate_params(stage2.params, heldout, cfg.patch_size, task)
                    for subject_id, pred in predictions.items():
                        output.binary.save_volume(pred, out_dir / "predictions" / task.value / subject_id / "labels.msegvol")
                    output.save_dice_report(report, out_dir / f"dice_{task.value}.csv")
                    result.reports[task] = report
            output.notes["initialized_from"] = stage2.initialized_from
            self._update_status(RunState.COMPLETED)
            return result
        except Exception as e:
            logger.error(f"Experiment failed during {self.status.stage}: {e}")
            self._update_status(RunState.FAILED, self.status.stage, str(e))
            raise

    def compare(self, seeds: Sequence[int]) -> ComparisonResult:
        """Pre-trained MO-Net vs from-scratch vs fine-tuned, at an equal joint-step budget."""
        result = ComparisonResult()
        self._update_status(RunState.RUNNING, "compare")
        try:
            for seed in seeds:
                cfg = dataclasses.replace(self.cfg, seed=seed)
                pre_subjects, joint_subjects, heldout = self._cohorts(seed)
                if not heldout:
                    raise DataError("comparison needs at least one held-out phantom")
                logger.info(f"Seed {seed}: pretraining on {len(pre_subjects)} partial-only phantoms")
                stage1 = pretrain(pre_subjects, cfg)
                runs = {
                    METHOD_MONET: (stage1.params, cfg),
                    METHOD_SCRATCH: (None, cfg),
                    METHOD_FINETUNE: (stage1.params, dataclasses.replace(cfg, lambda_w=0.0)),
                }
                for method, (init, method_cfg) in runs.items():
                    self._update_status(RunState.RUNNING, f"compare seed {seed} {method}")
                    trained = joint_train(joint_subjects, init, method_cfg, init_label=method)
                    report, _ = evaluate_params(trained.params, heldout, cfg.patch_size, Task.FULL)
                    result.reports[(seed, method)] = report
                    logger.info(f"Seed {seed} {method}: held-out Dice {report.mean:.3f}±{report.std:.3f}")
            self._update_status(RunState.COMPLETED)
            return result
        except Exception as e:
            logger.error(f"Comparison failed during {self.status.stage}: {e}")
            self._update_status(RunState.FAILED, self.status.stage, str(e))
            raise


def save_comparison(result: ComparisonResult, out_dir: Path, output: OutputPipeline) -> List[str]:
    """comparison.csv, per-method Dice rows and summary.json; returns the printable table."""
    output.csv.save_frame(result.table(), out_dir / "comparison.csv")
    for method in METHODS:
        frames = []
        for (seed, m), report in result.reports.items():
            if m == method:
                frame = report.to_frame()
                frame.insert(0, "seed", seed)
                frames.append(frame)
        if frames:
            output.csv.save_frame(pd.concat(frames, ignore_index=True), out_dir / f"dice_{method}.csv")
    medians = result.medians()
    output.json.save({
        'median_mean_dice': medians,
        'pretrained_beats_scratch': result.pretrained_beats_scratch(),
        'seeds': list(dict.fromkeys(seed for seed, _ in result.reports)),
    }, out_dir / "summary.json")

    lines = [f"{'method':<16} median held-out Dice"]
    lines += [f"{method:<16} {value:.3f}" for method, value in medians.items()]
    return lines


def experiment_table(result: ExperimentResult) -> List[str]:
    return summary_table({f"mo-net/{task.value}": report for task, report in result.reports.items()})
