"""
Tiled whole-volume inference and Dice evaluation.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.config import config
from core.engine import softmax_channels
from core.exceptions import EvaluationError, InferenceError, ShapeError
from core.models import DiceRecord, DiceReport, Head, LabelVolume, Task, Volume
from core.networks import ModelParams, forward

logger = logging.getLogger(__name__)

ACROSS = ("subjects", "structures")

Corner = Tuple[int, int, int]


def tile_starts(extent: int, patch: int, stride: int) -> List[int]:
    """Window offsets along one axis; a final window is flushed to the border."""
    if extent < patch:
        raise InferenceError(f"volume extent {extent} is smaller than patch {patch}")
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def tile_corners(dims: Sequence[int], patch: int, stride: int) -> List[Corner]:
    per_axis = [tile_starts(n, patch, stride) for n in dims]
    return [(d, h, w) for d in per_axis[0] for h in per_axis[1] for w in per_axis[2]]


def tile_probabilities(params: ModelParams, volume: Volume, patch_size: int, head: Head,
                       stride: Optional[int] = None, workers: Optional[int] = None) -> np.ndarray:
    """Per-voxel class probabilities averaged over overlapping tiles, shape [C, D, H, W]."""
    if not params.has_head(head):
        raise InferenceError(f"{params.kind} parameters have no decoder for head {head.value}")
    stride = max(1, patch_size // 2) if stride is None else stride
    if stride < 1:
        raise InferenceError(f"stride must be >= 1, got {stride}")
    corners = tile_corners(volume.dims, patch_size, stride)
    workers = config.runtime.threads if workers is None else max(1, workers)

    def run_tile(corner: Corner) -> np.ndarray:
        d, h, w = corner
        block = volume.data[d:d + patch_size, h:h + patch_size, w:w + patch_size]
        logits = forward(params, block[None], heads=[head]).for_head(head)
        return softmax_channels(logits).data.astype(np.float64)

    acc: Optional[np.ndarray] = None
    hits = np.zeros(volume.dims, dtype=np.float64)

    def accumulate(corner: Corner, prob: np.ndarray):
        nonlocal acc
        if acc is None:
            acc = np.zeros((prob.shape[0],) + volume.dims, dtype=np.float64)
        d, h, w = corner
        region = (slice(d, d + patch_size), slice(h, h + patch_size), slice(w, w + patch_size))
        acc[(slice(None),) + region] += prob
        hits[region] += 1.0

    # accumulation always follows corner order
    if workers <= 1 or len(corners) == 1:
        for corner in corners:
            accumulate(corner, run_tile(corner))
    else:
        chunk = workers * 2
        with ThreadPoolExecutor(max_workers=workers) as executor:
            for begin in range(0, len(corners), chunk):
                batch = corners[begin:begin + chunk]
                for corner, prob in zip(batch, executor.map(run_tile, batch)):
                    accumulate(corner, prob)

    logger.debug(f"Tiled {volume.dims} with {len(corners)} windows of {patch_size} (stride {stride})")
    return acc / hits[None]


def tile_infer(params: ModelParams, volume: Volume, patch_size: int, head: Head,
               stride: Optional[int] = None, workers: Optional[int] = None) -> LabelVolume:
    """Argmax of tile-averaged probabilities; ties go to the lowest class id."""
    prob = tile_probabilities(params, volume, patch_size, head, stride, workers)
    labels = np.argmax(prob, axis=0).astype(np.uint16)
    return LabelVolume(labels, prob.shape[0], volume.spacing)


def dice(pred: LabelVolume, truth: LabelVolume, structure_id: int) -> float:
    """2|A & B| / (|A| + |B|); 1.0 when both are empty, 0.0 when exactly one is."""
    if pred.dims != truth.dims:
        raise ShapeError(f"prediction dims {pred.dims} differ from truth dims {truth.dims}")
    a = pred.data == structure_id
    b = truth.data == structure_id
    size_a = int(np.count_nonzero(a))
    size_b = int(np.count_nonzero(b))
    if size_a == 0 and size_b == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / (size_a + size_b)


def evaluated_structures(*volumes: LabelVolume) -> List[int]:
    """Non-background ids present in any of the volumes."""
    ids = set()
    for volume in volumes:
        ids.update(volume.present_ids())
    ids.discard(0)
    return sorted(ids)


def evaluate_subject(subject_id: str, pred: LabelVolume, truth: LabelVolume,
                     structures: Optional[Iterable[int]] = None) -> List[DiceRecord]:
    """Dice rows for one subject; default structures are those present in either volume."""
    ids = evaluated_structures(pred, truth) if structures is None else [int(s) for s in structures]
    return [DiceRecord(subject_id, s, dice(pred, truth, s)) for s in ids if s != 0]


def aggregate(rows: Sequence[DiceRecord], task: Task = Task.FULL, across: str = "subjects") -> DiceReport:
    """Per-group structure means, then the cohort mean and population std.

    ``across="subjects"`` averages structures within each subject and reports
    the spread over subjects; ``across="structures"`` does the converse.
    """
    if across not in ACROSS:
        raise EvaluationError(f"across must be one of {ACROSS}, got {across!r}")
    frame = pd.DataFrame([(r.subject, r.structure, r.dice) for r in rows],
                         columns=["subject", "structure", "dice"])
    frame = frame[frame["structure"] != 0]
    if frame.empty:
        raise EvaluationError("no Dice values to aggregate")
    if ((frame["dice"] < 0) | (frame["dice"] > 1)).any():
        raise EvaluationError("Dice values must lie in [0, 1]")

    frame = frame.sort_values(["subject", "structure"], kind="mergesort").reset_index(drop=True)
    key = "subject" if across == "subjects" else "structure"
    group_means = frame.groupby(key, sort=True)["dice"].mean()
    mean = float(group_means.mean())
    std = float(group_means.std(ddof=0))

    kept = [DiceRecord(str(s), int(k), float(d)) for s, k, d in frame.itertuples(index=False)]
    return DiceReport(
        task=task,
        rows=kept,
        group_means={str(k): float(v) for k, v in group_means.items()},
        mean=mean,
        std=std,
        n_subjects=int(frame["subject"].nunique()),
        across=across,
    )


def evaluate_cohort(predictions: Mapping[str, LabelVolume], truths: Mapping[str, LabelVolume],
                    task: Task = Task.FULL, structures: Optional[Sequence[int]] = None,
                    across: str = "subjects") -> DiceReport:
    """Dice report over every truth subject; each must have a prediction.

    Without an explicit structure list every subject is scored on the union of
    ids present in the truth volumes, so row counts are subjects x structures.
    """
    if not truths:
        raise EvaluationError("no ground-truth subjects to evaluate")
    missing = sorted(set(truths) - set(predictions))
    if missing:
        raise EvaluationError(f"no prediction for subjects {missing}")
    extra = sorted(set(predictions) - set(truths))
    if extra:
        logger.warning(f"Ignoring predictions without ground truth: {extra}")
    ids = list(structures) if structures is not None else evaluated_structures(*truths.values())
    rows: List[DiceRecord] = []
    for subject_id in sorted(truths):
        rows.extend(evaluate_subject(subject_id, predictions[subject_id], truths[subject_id], ids))
    report = aggregate(rows, task, across)
    logger.info(f"{task.value} Dice {report.mean:.3f}±{report.std:.3f} over {report.n_subjects} subjects")
    return report


def summary_table(reports: Dict[str, DiceReport]) -> List[str]:
    """Printable method / Dice (mean±std) rows."""
    lines = [f"{'method':<16} Dice (mean±std)"]
    lines += [report.format_row(method) for method, report in reports.items()]
    return lines
