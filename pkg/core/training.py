"""
Losses and the two training stages.

Stage 1 (``pretrain``) fits a single-decoder U-Net to partial labels.
Stage 2 (``joint_train``) loads those parameters into the dual-decoder
network and fits the weighted sum of the full-task and partial-task losses.
Both stages draw batch-size-1 patches from a deterministic PatchStream, so a
run is a pure function of (subjects, config).
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.config import TrainConfig, config
from core.data import PatchStream, StreamItem, center_patch, partial_labels, zscore_normalize
from core.engine import AdamState, Tape, Tensor, adam_step, add, backward, cross_entropy, scale, softmax_channels
from core.exceptions import DataError, LabelError, TrainingDivergedError, TransferError
from core.models import Head, LabelVolume, Stage, Subject, TrainLog, TrainRecord, TransferManifest
from core.networks import UNET, ForwardOutput, ModelParams, build_monet, build_unet, forward, transfer_params
from core.seeding import make_rng

logger = logging.getLogger(__name__)

Target = Union[LabelVolume, np.ndarray]


def _target_array(target: Target) -> np.ndarray:
    data = target.data if isinstance(target, LabelVolume) else np.asarray(target)
    return data.astype(np.intp, copy=False)


def loss_partial(logits_w: Tensor, target_w: Target, tape: Optional[Tape] = None) -> Tensor:
    """Voxel-mean categorical cross-entropy of the partial-task head."""
    return cross_entropy(softmax_channels(logits_w, tape=tape), _target_array(target_w), tape=tape)


def loss_full(logits_s: Tensor, target_s: Target, tape: Optional[Tape] = None) -> Tensor:
    return cross_entropy(softmax_channels(logits_s, tape=tape), _target_array(target_s), tape=tape)


def joint_loss_terms(out: ForwardOutput, target_s: Target, target_w: Target, lambda_s: float,
                     lambda_w: float, tape: Optional[Tape] = None) -> Tuple[Tensor, Tensor, Tensor]:
    """(total, partial-task loss, full-task loss) of one forward output."""
    l_s = loss_full(out.for_head(Head.FULL), target_s, tape)
    l_w = loss_partial(out.for_head(Head.PARTIAL), target_w, tape)
    total = add(scale(l_s, lambda_s, tape=tape), scale(l_w, lambda_w, tape=tape), tape=tape)
    return total, l_w, l_s


def loss_joint(out: ForwardOutput, target_s: Target, target_w: Target, lambda_s: float,
               lambda_w: float, tape: Optional[Tape] = None) -> Tensor:
    """lambda_s * CE(full) + lambda_w * CE(partial)."""
    return joint_loss_terms(out, target_s, target_w, lambda_s, lambda_w, tape)[0]


@dataclass
class TrainResult:
    """Everything one training stage produces."""
    stage: Stage
    params: ModelParams
    adam: AdamState
    log: TrainLog
    steps: int
    manifest: Optional[TransferManifest] = None
    initialized_from: Optional[str] = None
    validation_losses: List[float] = field(default_factory=list)
    stopped_early: bool = False


StepLoss = Callable[[ModelParams, np.ndarray, Tuple[np.ndarray, ...], Optional[Tape]],
                    Tuple[Tensor, Tensor, Optional[Tensor]]]


def _prepare(subjects: Sequence[Subject], stage: Stage, num_partial: int,
             num_full: Optional[int]) -> List[StreamItem]:
    """z-score every image once and collect its training targets."""
    if not subjects:
        raise DataError(f"{stage.value} needs a non-empty dataset")
    items = []
    for subject in subjects:
        target_w = partial_labels(subject)
        labels = [target_w]
        if num_full is not None:
            if subject.labels is None:
                raise DataError(f"subject {subject.subject_id} has no full labels for joint training")
            labels.append(subject.labels)
        for lab, limit in zip(labels, [num_partial, num_full]):
            top = int(lab.data.max())
            if top >= limit:
                raise LabelError(
                    f"subject {subject.subject_id}: label id {top} does not fit {limit} output classes")
        items.append(StreamItem(subject.subject_id, zscore_normalize(subject.image), tuple(labels)))
    return items


def _split(items: List[StreamItem], cfg: TrainConfig, stage: Stage) -> Tuple[List[StreamItem], List[StreamItem]]:
    if cfg.validation_fraction <= 0 or len(items) < 2:
        return items, []
    n_val = min(len(items) - 1, max(1, int(round(cfg.validation_fraction * len(items)))))
    order = make_rng(cfg.seed, stage.value, "split").permutation(len(items))
    held = set(int(i) for i in order[:n_val])
    logger.info(f"Holding out {n_val} of {len(items)} subjects for validation")
    return ([it for i, it in enumerate(items) if i not in held],
            [it for i, it in enumerate(items) if i in held])


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Constant lr, or step decay when lr_decay_every is set."""
    if cfg.lr_decay_every <= 0:
        return cfg.lr
    return cfg.lr * cfg.lr_decay_factor ** (step // cfg.lr_decay_every)


def _validation_loss(params: ModelParams, items: List[StreamItem], cfg: TrainConfig,
                     step_loss: StepLoss) -> float:
    losses = []
    for item in items:
        sample = center_patch(item.image, *item.labels, size=cfg.patch_size)
        targets = tuple(lab.data.astype(np.intp) for lab in sample.labels)
        total, _, _ = step_loss(params, sample.image.data[None], targets, None)
        losses.append(total.item())
    return float(np.mean(losses))


def _run_stage(stage: Stage, params: ModelParams, items: List[StreamItem], cfg: TrainConfig,
               epochs: int, step_loss: StepLoss) -> TrainResult:
    train_items, val_items = _split(items, cfg, stage)
    steps_per_epoch = cfg.steps_per_epoch or len(train_items)
    stream = PatchStream(
        train_items, cfg.patch_size, cfg.seed, stage.value, steps_per_epoch,
        augment_magnitude=cfg.augment_magnitude if cfg.augment else 0.0,
        workers=min(cfg.prefetch_workers, config.runtime.threads),
    )
    adam = AdamState(lr=cfg.lr)
    log = TrainLog()
    result = TrainResult(stage=stage, params=params, adam=adam, log=log, steps=0)
    record_time = config.runtime.record_wall_time
    best: Optional[Tuple[float, ModelParams]] = None
    stale = 0

    logger.info(f"Starting {stage.value}: {epochs} epochs x {steps_per_epoch} steps "
                f"on {len(train_items)} subjects")
    for epoch in range(epochs):
        first = epoch * steps_per_epoch
        for patch in stream.iterate(first, first + steps_per_epoch):
            started = time.perf_counter()
            tape = Tape()
            total, l_w, l_s = step_loss(params, patch.image, patch.targets, tape)
            value = total.item()
            if not math.isfinite(value):
                logger.error(f"{stage.value} loss became {value} at step {patch.index}")
                raise TrainingDivergedError(stage.value, patch.index, value)
            params.zero_grad()
            backward(total, tape)
            adam_step(params, adam, lr=learning_rate(cfg, patch.index))
            log.append(TrainRecord(
                step=patch.index,
                stage=stage.value,
                loss_total=value,
                loss_w=l_w.item(),
                loss_s=None if l_s is None else l_s.item(),
                wall_ms=(time.perf_counter() - started) * 1000.0 if record_time else 0.0,
            ))
            result.steps += 1
        params.zero_grad()
        logger.info(f"{stage.value} epoch {epoch + 1}/{epochs}: last loss {log.records[-1].loss_total:.4f}")

        if val_items:
            val = _validation_loss(params, val_items, cfg, step_loss)
            result.validation_losses.append(val)
            logger.info(f"{stage.value} epoch {epoch + 1}: validation loss {val:.4f}")
            if best is None or val < best[0]:
                best = (val, params.copy())
                stale = 0
            else:
                stale += 1
                if cfg.early_stopping_patience and stale >= cfg.early_stopping_patience:
                    logger.info(f"Early stopping {stage.value} after epoch {epoch + 1}")
                    result.stopped_early = True
                    break

    if best is not None and cfg.early_stopping_patience:
        for name, tensor in best[1].items():
            params[name].data[...] = tensor.data
    return result


def pretrain(subjects: Sequence[Subject], cfg: TrainConfig) -> TrainResult:
    """Stage 1: fit a fresh U-Net to partial labels."""
    items = _prepare(subjects, Stage.PRETRAIN, cfg.arch.num_partial_classes, None)
    params = build_unet(cfg.arch, cfg.seed)

    def step_loss(p, image, targets, tape):
        out = forward(p, image, tape=tape, heads=[Head.PARTIAL])
        l_w = loss_partial(out.logits_w, targets[0], tape)
        return l_w, l_w, None

    result = _run_stage(Stage.PRETRAIN, params, items, cfg, cfg.pretrain_epochs, step_loss)
    result.initialized_from = "none"
    return result


def joint_train(subjects: Sequence[Subject], init: Optional[ModelParams], cfg: TrainConfig,
                init_label: Optional[str] = None) -> TrainResult:
    """Stage 2: transfer ``init`` (None for a from-scratch baseline) and fit the joint loss."""
    items = _prepare(subjects, Stage.JOINT, cfg.arch.num_partial_classes, cfg.arch.num_full_classes)
    params = build_monet(cfg.arch, cfg.seed)
    manifest = None
    if init is not None:
        if init.kind != UNET:
            raise TransferError(f"joint training starts from a stage-1 U-Net, got a {init.kind}")
        params, manifest = transfer_params(init, params)

    def step_loss(p, image, targets, tape):
        out = forward(p, image, tape=tape)
        return joint_loss_terms(out, targets[1], targets[0], cfg.lambda_s, cfg.lambda_w, tape)

    result = _run_stage(Stage.JOINT, params, items, cfg, cfg.joint_epochs, step_loss)
    result.manifest = manifest
    result.initialized_from = init_label or ("none" if init is None else "stage-1 parameters")
    return result
