"""
Gradient verification suite: every op family on small random inputs, then the
whole dual-decoder network under the joint loss, all in double precision.
"""

import logging
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from core.config import ArchConfig
from core.engine import (
    GradCheckResult, Tape, Tensor, concat_channels, conv3d, corrupted_backward, cross_entropy,
    finite_diff_check, leaky_relu, max_pool3d, softmax_channels, upsample_nearest, weighted_sum,
)
from core.exceptions import ShapeError
from core.networks import build_monet, forward
from core.seeding import make_rng
from core.training import loss_joint

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
NETWORK_SAMPLES = 16
NETWORK_ARCH = dict(base_channels=2, depth=2, kernel_size=3, num_partial_classes=3, num_full_classes=4)

OP_FAMILIES = ("conv3d", "leaky_relu", "max_pool3d", "upsample_nearest", "concat_channels",
               "softmax_channels", "cross_entropy")


@dataclass
class GradCheckReport:
    """Results of one suite run, one entry per checked family."""
    results: List[GradCheckResult] = field(default_factory=list)
    fault: Optional[str] = None

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    def families(self) -> List[str]:
        return [r.name for r in self.results]

    def to_lines(self) -> List[str]:
        lines = [f"{'family':<20} {'max rel err':>12} {'checked':>8} {'resampled':>10}  status"]
        for r in self.results:
            lines.append(f"{r.name:<20} {r.max_rel_error:>12.3e} {r.checked:>8d} {r.resampled:>10d}  "
                         f"{'ok' if r.passed else 'FAIL'}")
        lines.append(f"max relative error {self.max_rel_error:.3e} (tolerance {TOLERANCE:g})")
        return lines

    def to_dict(self) -> Dict:
        return {
            'passed': self.passed,
            'max_rel_error': self.max_rel_error,
            'fault': self.fault,
            'families': [
                {'name': r.name, 'max_rel_error': r.max_rel_error, 'checked': r.checked,
                 'resampled': r.resampled, 'passed': r.passed}
                for r in self.results
            ],
        }


def _param(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape), requires_grad=True, dtype=np.float64)


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _op_checks(seed: int) -> Dict[str, Callable[[], GradCheckResult]]:
    """Deferred checks, one per op family, each with its own input stream."""

    def conv():
        rng = make_rng(seed, "gradcheck", "conv3d")
        inputs = {"x": _param(rng, 2, 4, 4, 4), "w": _param(rng, 3, 2, 3, 3, 3), "b": _param(rng, 3)}
        probe = _probe(rng, (3, 4, 4, 4))
        return finite_diff_check(
            lambda t: weighted_sum(conv3d(inputs["x"], inputs["w"], inputs["b"], tape=t), probe, tape=t),
            inputs, TOLERANCE, name="conv3d")

    def lrelu():
        rng = make_rng(seed, "gradcheck", "leaky_relu")
        inputs = {"x": _param(rng, 2, 3, 3, 3)}
        probe = _probe(rng, (2, 3, 3, 3))
        return finite_diff_check(lambda t: weighted_sum(leaky_relu(inputs["x"], tape=t), probe, tape=t),
                                 inputs, TOLERANCE, name="leaky_relu")

    def pool():
        rng = make_rng(seed, "gradcheck", "max_pool3d")
        inputs = {"x": _param(rng, 2, 4, 4, 4)}
        probe = _probe(rng, (2, 2, 2, 2))
        return finite_diff_check(lambda t: weighted_sum(max_pool3d(inputs["x"], tape=t), probe, tape=t),
                                 inputs, TOLERANCE, name="max_pool3d")

    def upsample():
        rng = make_rng(seed, "gradcheck", "upsample_nearest")
        inputs = {"x": _param(rng, 2, 2, 2, 2)}
        probe = _probe(rng, (2, 4, 4, 4))
        return finite_diff_check(
            lambda t: weighted_sum(upsample_nearest(inputs["x"], tape=t), probe, tape=t),
            inputs, TOLERANCE, name="upsample_nearest")

    def concat():
        rng = make_rng(seed, "gradcheck", "concat_channels")
        inputs = {"a": _param(rng, 1, 2, 2, 2), "b": _param(rng, 3, 2, 2, 2)}
        probe = _probe(rng, (4, 2, 2, 2))
        return finite_diff_check(
            lambda t: weighted_sum(concat_channels(inputs["a"], inputs["b"], tape=t), probe, tape=t),
            inputs, TOLERANCE, name="concat_channels")

    def softmax():
        rng = make_rng(seed, "gradcheck", "softmax_channels")
        inputs = {"logits": _param(rng, 4, 2, 2, 2, low=-2.0, high=2.0)}
        probe = _probe(rng, (4, 2, 2, 2))
        return finite_diff_check(
            lambda t: weighted_sum(softmax_channels(inputs["logits"], tape=t), probe, tape=t),
            inputs, TOLERANCE, name="softmax_channels")

    def xent():
        rng = make_rng(seed, "gradcheck", "cross_entropy")
        inputs = {"prob": _param(rng, 3, 2, 2, 2, low=0.05, high=1.0)}
        target = rng.integers(0, 3, (2, 2, 2))
        return finite_diff_check(lambda t: cross_entropy(inputs["prob"], target, tape=t),
                                 inputs, TOLERANCE, name="cross_entropy")

    return {
        "conv3d": conv,
        "leaky_relu": lrelu,
        "max_pool3d": pool,
        "upsample_nearest": upsample,
        "concat_channels": concat,
        "softmax_channels": softmax,
        "cross_entropy": xent,
    }


def check_network(size: int = 8, seed: int = 0, samples: int = NETWORK_SAMPLES) -> GradCheckResult:
    """Joint loss of a small dual-decoder network against central differences."""
    arch = ArchConfig(**NETWORK_ARCH)
    if size < arch.divisor or size % arch.divisor:
        raise ShapeError(f"gradient check patch size must be a multiple of {arch.divisor}, got {size}")
    params = build_monet(arch, seed, dtype=np.float64)
    rng = make_rng(seed, "gradcheck", "network")
    patch = rng.standard_normal((1, size, size, size))
    target_w = rng.integers(0, arch.num_partial_classes, (size,) * 3)
    target_s = rng.integers(0, arch.num_full_classes, (size,) * 3)

    def loss(tape: Tape) -> Tensor:
        out = forward(params, patch, tape=tape)
        return loss_joint(out, target_s, target_w, 0.5, 0.5, tape=tape)

    return finite_diff_check(loss, dict(params.items()), TOLERANCE, samples_per_tensor=samples,
                             seed=seed, name="monet_joint_loss")


def run_suite(size: int = 8, seed: int = 0, fault: Optional[str] = None,
              families: Optional[List[str]] = None) -> GradCheckReport:
    """Check the requested op families (all by default) and the full network.

    ``fault`` names an op whose backward rule is corrupted for the duration of
    the run; the report must then fail.
    """
    checks = _op_checks(seed)
    selected = list(OP_FAMILIES) if families is None else families
    unknown = [f for f in selected if f not in checks]
    if unknown:
        raise KeyError(f"unknown op families {unknown}; known: {list(OP_FAMILIES)}")

    report = GradCheckReport(fault=fault)
    with corrupted_backward(fault) if fault else nullcontext():
        for family in selected:
            result = checks[family]()
            logger.info(f"{family}: max rel err {result.max_rel_error:.3e} "
                        f"({result.checked} checked, {result.resampled} resampled)")
            report.results.append(result)
        result = check_network(size, seed)
        logger.info(f"network: max rel err {result.max_rel_error:.3e} "
                    f"({result.checked} checked, {result.resampled} resampled)")
        report.results.append(result)
    return report
