#!/usr/bin/env python3
"""
Command-line runner for the partial-to-full segmentation transfer pipeline
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional


def setup_logging(verbose: bool = False, log_file: Optional[str] = None):
    """Setup logging configuration."""
    try:
        from core.config import config
        default_level = getattr(logging, config.runtime.log_level, logging.INFO)
    except ImportError:
        default_level = logging.INFO

    level = logging.DEBUG if verbose else default_level
    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def parse_arguments(argv: Optional[List[str]] = None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        description="Two-stage partial-to-full volumetric segmentation pipeline",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python run_mseg.py phantom --count 20 --out data/joint
  python run_mseg.py phantom --count 40 --partial-only --out data/pretrain
  python run_mseg.py pretrain --data data/pretrain --out runs/stage1.ckpt
  python run_mseg.py jointtrain --data data/joint --init runs/stage1.ckpt --out runs/stage2.ckpt
  python run_mseg.py infer --ckpt runs/stage2.ckpt --input data/joint/subject_000/image.msegvol --head s --out seg.msegvol
  python run_mseg.py evaluate --pred runs/pred --truth data/heldout --out runs/dice.csv
  python run_mseg.py gradcheck --size 8
  python run_mseg.py compare --seeds 5 --out runs/compare
        """
    )
    parser.add_argument('--verbose', '-v', action='store_true', help='Enable verbose logging')
    parser.add_argument('--log-file', help='Also write the log to this file')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('phantom', help='Generate a synthetic phantom dataset')
    p.add_argument('--count', type=int, default=20, help='Number of phantoms (default: 20)')
    p.add_argument('--size', type=int, default=32, help='Edge length in voxels (default: 32)')
    p.add_argument('--structures', type=int, default=6, help='Full-annotation structures K (default: 6)')
    p.add_argument('--partial', type=int, default=3, help='Partial-annotation structures P (default: 3)')
    p.add_argument('--noise', type=float, default=0.05, help='Gaussian noise sigma (default: 0.05)')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--partial-only', action='store_true',
                   help='Write partial labels instead of full labels (pretraining cohorts)')
    p.add_argument('--out', required=True, help='Output dataset directory')

    p = sub.add_parser('pretrain', help='Stage 1: train a U-Net on partial labels')
    p.add_argument('--data', required=True, help='Dataset directory of subject folders')
    p.add_argument('--config', help='TrainConfig JSON document')
    p.add_argument('--out', required=True, help='Output checkpoint path')

    p = sub.add_parser('jointtrain', help='Stage 2: joint training of the dual-decoder network')
    p.add_argument('--data', required=True, help='Dataset directory with full labels and label maps')
    p.add_argument('--init', required=True, help="Stage-1 checkpoint, or 'none' for a from-scratch baseline")
    p.add_argument('--config', help='TrainConfig JSON document')
    p.add_argument('--out', required=True, help='Output checkpoint path')

    p = sub.add_parser('infer', help='Tiled whole-volume inference')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--input', required=True, help='Image volume (.msegvol or .nii)')
    p.add_argument('--head', choices=['w', 's'], default='s', help='w = partial task, s = full task')
    p.add_argument('--patch-size', type=int, default=32)
    p.add_argument('--stride', type=int, help='Tile stride (default: patch size / 2)')
    p.add_argument('--no-normalize', action='store_true', help='Skip z-score normalization of the input')
    p.add_argument('--out', required=True, help='Output label volume')

    p = sub.add_parser('evaluate', help='Dice evaluation of predictions against ground truth')
    p.add_argument('--pred', required=True, help='Prediction directory')
    p.add_argument('--truth', required=True, help='Ground-truth dataset directory')
    p.add_argument('--map', help='Label map; evaluates the partial task on mapped ground truth')
    p.add_argument('--structures', type=_int_list, help='Comma-separated structure ids to evaluate')
    p.add_argument('--across', choices=['subjects', 'structures'], default='subjects',
                   help='Spread of the reported mean±std (default: subjects)')
    p.add_argument('--out', required=True, help='Report CSV; the JSON summary is written next to it')

    p = sub.add_parser('gradcheck', help='Finite-difference gradient suite')
    p.add_argument('--size', type=int, default=8, help='Network patch edge (default: 8)')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--inject-fault', metavar='OP', help='Corrupt the backward rule of OP (negative control)')
    p.add_argument('--out', help='Optional JSON report path')

    p = sub.add_parser('experiment', help='Full two-stage run on generated phantom cohorts')
    p.add_argument('--config', help='TrainConfig JSON document')
    p.add_argument('--seed', type=int, help='Overrides the config seed')
    p.add_argument('--pretrain-count', type=int, default=40)
    p.add_argument('--joint-count', type=int, default=4)
    p.add_argument('--heldout-count', type=int, default=6)
    p.add_argument('--size', type=int, default=32)
    p.add_argument('--out', help='Output directory (default: $MSEG_OUTPUT_DIR/experiment)')

    p = sub.add_parser('compare', help='MO-Net vs from-scratch vs fine-tuned over several seeds')
    p.add_argument('--config', help='TrainConfig JSON document')
    p.add_argument('--seeds', type=int, default=5, help='Number of seeded runs (default: 5)')
    p.add_argument('--seed', type=int, default=0, help='Base seed the per-run seeds are derived from')
    p.add_argument('--pretrain-count', type=int, default=40)
    p.add_argument('--joint-count', type=int, default=4)
    p.add_argument('--heldout-count', type=int, default=6)
    p.add_argument('--size', type=int, default=32)
    p.add_argument('--out', help='Output directory (default: $MSEG_OUTPUT_DIR/compare)')

    return parser.parse_args(argv)


def _manifest_dir(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.parent


def cmd_phantom(args) -> bool:
    from core.output import OutputPipeline
    from core.pipeline import CohortSpec, make_cohort

    if args.count < 0:
        raise ValueError(f"--count must be >= 0, got {args.count}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = CohortSpec(size=args.size, num_structures=args.structures, partial_size=args.partial,
                        noise_sigma=args.noise)
    cohort.phantom(args.seed, args.seed)  # validates the flags even when count is 0
    output = OutputPipeline("phantom", seed=args.seed)
    output.config_snapshot = {
        'count': args.count, 'size': args.size, 'structures': args.structures,
        'partial': args.partial, 'noise_sigma': args.noise, 'partial_only': args.partial_only
    }

    for subject in make_cohort(cohort, args.count, args.seed, partial_only=args.partial_only):
        output.binary.save_subject(subject, out / subject.subject_id)
    output.finalize(out)
    print(f"✅ Wrote {args.count} phantoms to {out}")
    return True


def _load_dataset(path: str):
    from core.volumes import read_dataset

    subjects = read_dataset(path)
    if not subjects:
        raise FileNotFoundError(f"no subjects found in {path}")
    return subjects


def cmd_pretrain(args) -> bool:
    from core.config import load_train_config
    from core.output import OutputPipeline
    from core.training import pretrain

    cfg = load_train_config(args.config)
    subjects = _load_dataset(args.data)
    out = Path(args.out)
    output = OutputPipeline("pretrain", seed=cfg.seed)
    output.config_snapshot = cfg.to_dict()
    output.add_inputs([args.data] + ([args.config] if args.config else []))

    result = pretrain(subjects, cfg)
    output.binary.save_checkpoint(result.params, out, result.adam)
    output.csv.save_train_log(result.log, out.with_name(f"{out.stem}_log.csv"))
    output.notes.update({'steps': result.steps, 'initialized_from': result.initialized_from})
    output.finalize(_manifest_dir(out), f"{out.stem}.manifest.json")

    if result.log.records:
        print(f"📉 Loss {result.log.records[0].loss_total:.4f} -> {result.log.records[-1].loss_total:.4f} "
              f"over {result.steps} steps")
    print(f"✅ Stage-1 checkpoint: {out}")
    return True


def cmd_jointtrain(args) -> bool:
    from core.checkpoint import load_checkpoint
    from core.config import load_train_config
    from core.output import OutputPipeline
    from core.training import joint_train

    cfg = load_train_config(args.config)
    subjects = _load_dataset(args.data)
    init = None
    init_label = "none"
    if args.init.lower() != "none":
        init, _ = load_checkpoint(args.init)
        init_label = args.init
    out = Path(args.out)
    output = OutputPipeline("jointtrain", seed=cfg.seed)
    output.config_snapshot = cfg.to_dict()
    output.add_inputs([args.data] + ([args.init] if init is not None else [])
                      + ([args.config] if args.config else []))

    logging.getLogger(__name__).info(f"Joint training initialized from {init_label}")
    result = joint_train(subjects, init, cfg, init_label=init_label)
    output.binary.save_checkpoint(result.params, out, result.adam)
    output.csv.save_train_log(result.log, out.with_name(f"{out.stem}_log.csv"))
    if result.manifest is not None:
        output.json.save(result.manifest.to_dict(), out.with_name(f"{out.stem}_transfer.json"))
    output.notes.update({'steps': result.steps, 'initialized_from': init_label})
    output.finalize(_manifest_dir(out), f"{out.stem}.manifest.json")

    print(f"🔧 Initialized from: {init_label}")
    print(f"✅ Stage-2 checkpoint: {out}")
    return True


def cmd_infer(args) -> bool:
    from core.checkpoint import load_checkpoint
    from core.data import zscore_normalize
    from core.evaluation import tile_infer
    from core.models import Head, Volume
    from core.output import OutputPipeline
    from core.volumes import read_volume

    params, _ = load_checkpoint(args.ckpt)
    volume = read_volume(args.input, as_labels=False)
    if not isinstance(volume, Volume):
        raise ValueError(f"{args.input} holds labels, not an image")
    if not args.no_normalize:
        volume = zscore_normalize(volume)
    head = Head(args.head)
    seg = tile_infer(params, volume, args.patch_size, head, stride=args.stride)

    out = Path(args.out)
    output = OutputPipeline("infer")
    output.config_snapshot = {'head': args.head, 'patch_size': args.patch_size, 'stride': args.stride,
                              'normalize': not args.no_normalize}
    output.add_inputs([args.ckpt, args.input])
    output.binary.save_volume(seg, out)
    output.finalize(_manifest_dir(out), f"{out.stem}.manifest.json")
    print(f"✅ Segmentation {seg.dims} written to {out}")
    return True


def cmd_evaluate(args) -> bool:
    from core.data import extract_partial
    from core.evaluation import evaluate_cohort, summary_table
    from core.models import Task
    from core.output import OutputPipeline
    from core.volumes import read_label_dir, read_label_map

    predictions = read_label_dir(args.pred)
    truths = read_label_dir(args.truth)
    task = Task.FULL
    if args.map:
        label_map = read_label_map(args.map)
        truths = {k: extract_partial(v, label_map) for k, v in truths.items()}
        task = Task.PARTIAL
    report = evaluate_cohort(predictions, truths, task, args.structures, args.across)

    out = Path(args.out)
    output = OutputPipeline("evaluate")
    output.config_snapshot = {'task': task.value, 'structures': args.structures, 'across': args.across}
    output.add_inputs([args.pred, args.truth] + ([args.map] if args.map else []))
    output.save_dice_report(report, out)
    output.finalize(_manifest_dir(out), f"{out.stem}.manifest.json")

    for line in summary_table({task.value: report}):
        print(line)
    return True


def cmd_gradcheck(args) -> bool:
    from core.gradcheck import run_suite
    from core.output import OutputPipeline

    report = run_suite(size=args.size, seed=args.seed, fault=args.inject_fault)
    print("🧪 Gradient check")
    for line in report.to_lines():
        print(line)
    if args.out:
        out = Path(args.out)
        output = OutputPipeline("gradcheck", seed=args.seed)
        output.json.save(report.to_dict(), out)
        output.finalize(_manifest_dir(out), f"{out.stem}.manifest.json")
    print("✅ passed" if report.passed else "❌ failed")
    return report.passed


def _output_dir(value: Optional[str], name: str) -> Path:
    from core.config import config

    return Path(value) if value else config.runtime.output_dir / name


def cmd_experiment(args) -> bool:
    import dataclasses

    from core.config import load_train_config
    from core.output import OutputPipeline
    from core.pipeline import CohortSpec, ExperimentPipeline, experiment_table

    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cohort = CohortSpec(pretrain_count=args.pretrain_count, joint_count=args.joint_count,
                        heldout_count=args.heldout_count, size=args.size)
    out = _output_dir(args.out, "experiment")
    out.mkdir(parents=True, exist_ok=True)
    output = OutputPipeline("experiment", seed=cfg.seed)
    output.config_snapshot = {'train': cfg.to_dict(), 'cohort': vars(cohort)}

    result = ExperimentPipeline(cfg, cohort).run_experiment(out, output)
    output.finalize(out)
    for line in experiment_table(result):
        print(line)
    print(f"✅ Experiment artifacts in {out}")
    return True


def cmd_compare(args) -> bool:
    from core.config import load_train_config
    from core.output import OutputPipeline
    from core.pipeline import CohortSpec, ExperimentPipeline, comparison_seeds, save_comparison

    cfg = load_train_config(args.config)
    cohort = CohortSpec(pretrain_count=args.pretrain_count, joint_count=args.joint_count,
                        heldout_count=args.heldout_count, size=args.size)
    out = _output_dir(args.out, "compare")
    out.mkdir(parents=True, exist_ok=True)
    seeds = comparison_seeds(args.seed, args.seeds)
    output = OutputPipeline("compare", seed=args.seed)
    output.config_snapshot = {'train': cfg.to_dict(), 'cohort': vars(cohort), 'seeds': seeds}

    result = ExperimentPipeline(cfg, cohort).compare(seeds)
    lines = save_comparison(result, out, output)
    output.notes['pretrained_beats_scratch'] = result.pretrained_beats_scratch()
    output.finalize(out)
    for line in lines:
        print(line)
    print(f"🏆 Pre-trained beats from-scratch: {'yes' if result.pretrained_beats_scratch() else 'no'}")
    return True


COMMANDS = {
    'phantom': cmd_phantom,
    'pretrain': cmd_pretrain,
    'jointtrain': cmd_jointtrain,
    'infer': cmd_infer,
    'evaluate': cmd_evaluate,
    'gradcheck': cmd_gradcheck,
    'experiment': cmd_experiment,
    'compare': cmd_compare,
}


def run_command(args) -> bool:
    """Dispatch one sub-command; errors become a diagnostic and a False result."""
    try:
        from core.exceptions import MsegError
    except ImportError as e:
        print(f"❌ Missing dependencies: {e}")
        print("Please install requirements: pip install -r requirements.txt")
        return False

    logger = logging.getLogger(__name__)
    try:
        return COMMANDS[args.command](args)
    except (MsegError, ValueError, KeyError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {args.command} failed: {e}")
        return False


def main(argv: Optional[List[str]] = None):
    """Main function with CLI support."""
    args = parse_arguments(argv)
    setup_logging(args.verbose, args.log_file)
    success = run_command(args)
    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
