"""
Stage-1 U-Net and stage-2 dual-decoder network built on the differentiation engine.

Parameter names follow a fixed dot-path grammar, which the checkpoint format
and the transfer manifest rely on::

    encoder.level<i>.conv<1|2>.<weight|bias>          i = 0 .. depth-1
    encoder.bottleneck.conv<1|2>.<weight|bias>
    <decoder>.level<i>.<upconv|conv1|conv2>.<weight|bias>
    <decoder>.classifier.<weight|bias>

where <decoder> is ``decoder`` in the single-decoder U-Net and ``decoder_w``
(partial task) / ``decoder_s`` (full task) in the dual-decoder network. The
bottleneck belongs to the encoder, so it is shared by both decoders.
"""

import logging
import math
import re
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.config import ArchConfig
from core.engine import (
    LEAKY_SLOPE, Tape, Tensor, concat_channels, conv3d, leaky_relu, max_pool3d, upsample_nearest,
)
from core.exceptions import InferenceError, ShapeError, TransferError
from core.models import Head, TransferManifest
from core.seeding import make_rng

logger = logging.getLogger(__name__)

UNET = "unet"
MONET = "monet"

PARAM_NAME = re.compile(
    r"^(?:encoder\.(?:level\d+|bottleneck)\.conv[12]"
    r"|(?:decoder|decoder_w|decoder_s)\.(?:level\d+\.(?:upconv|conv1|conv2)|classifier))"
    r"\.(?:weight|bias)$"
)

_DECODERS = {UNET: ("decoder",), MONET: ("decoder_w", "decoder_s")}
_HEAD_OF = {"decoder": Head.PARTIAL, "decoder_w": Head.PARTIAL, "decoder_s": Head.FULL}


@dataclass(frozen=True)
class LayerSpec:
    """One convolution: parameter prefix, channel widths and kernel extent."""
    prefix: str
    c_in: int
    c_out: int
    kernel: int
    activated: bool = True

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        return (self.c_out, self.c_in, self.kernel, self.kernel, self.kernel)

    @property
    def parameter_count(self) -> int:
        return self.c_out * self.c_in * self.kernel ** 3 + self.c_out


def _decoder_layers(arch: ArchConfig, decoder: str, num_classes: int) -> List[LayerSpec]:
    k = arch.kernel_size
    layers = []
    for level in reversed(range(arch.depth)):
        c = arch.channels(level)
        layers += [
            LayerSpec(f"{decoder}.level{level}.upconv", arch.channels(level + 1), c, k),
            LayerSpec(f"{decoder}.level{level}.conv1", 2 * c, c, k),
            LayerSpec(f"{decoder}.level{level}.conv2", c, c, k),
        ]
    layers.append(LayerSpec(f"{decoder}.classifier", arch.channels(0), num_classes, 1, activated=False))
    return layers


def layer_specs(arch: ArchConfig, kind: str) -> List[LayerSpec]:
    """All convolutions of a network in forward order."""
    if kind not in _DECODERS:
        raise ValueError(f"unknown network kind {kind!r}")
    k = arch.kernel_size
    layers = []
    c_prev = 1
    for level in range(arch.depth):
        c = arch.channels(level)
        layers += [LayerSpec(f"encoder.level{level}.conv1", c_prev, c, k),
                   LayerSpec(f"encoder.level{level}.conv2", c, c, k)]
        c_prev = c
    c = arch.channels(arch.depth)
    layers += [LayerSpec("encoder.bottleneck.conv1", c_prev, c, k),
               LayerSpec("encoder.bottleneck.conv2", c, c, k)]

    if kind == UNET:
        layers += _decoder_layers(arch, "decoder", arch.num_partial_classes)
    else:
        layers += _decoder_layers(arch, "decoder_w", arch.num_partial_classes)
        layers += _decoder_layers(arch, "decoder_s", arch.num_full_classes)
    return layers


def expected_shapes(arch: ArchConfig, kind: str) -> Dict[str, Tuple[int, ...]]:
    """Canonical parameter names and shapes, in storage order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for layer in layer_specs(arch, kind):
        shapes[f"{layer.prefix}.weight"] = layer.weight_shape
        shapes[f"{layer.prefix}.bias"] = (layer.c_out,)
    return shapes


def parameter_count(arch: ArchConfig, kind: str) -> int:
    return sum(layer.parameter_count for layer in layer_specs(arch, kind))


def infer_kind(names: Sequence[str]) -> str:
    if any(n.startswith("decoder_s.") or n.startswith("decoder_w.") for n in names):
        return MONET
    return UNET


class ModelParams(Mapping):
    """Ordered map from canonical parameter name to Tensor."""

    def __init__(self, arch: ArchConfig, tensors: Dict[str, Tensor], kind: Optional[str] = None):
        self.arch = arch
        self.kind = kind or infer_kind(list(tensors))
        self._tensors: Dict[str, Tensor] = dict(tensors)
        self.validate()

    def validate(self):
        """Name set and shapes must match the architecture; raises ShapeError on the first offender."""
        expected = expected_shapes(self.arch, self.kind)
        for name in self._tensors:
            if not PARAM_NAME.match(name):
                raise ShapeError(f"parameter name {name!r} violates the naming grammar")
            if name not in expected:
                raise ShapeError(f"unexpected parameter {name!r} for a {self.kind} with {self.arch}")
        for name, shape in expected.items():
            if name not in self._tensors:
                raise ShapeError(f"missing parameter {name!r}")
            if self._tensors[name].shape != shape:
                raise ShapeError(
                    f"parameter {name!r} has shape {self._tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype

    @property
    def decoders(self) -> Tuple[str, ...]:
        return _DECODERS[self.kind]

    def has_head(self, head: Head) -> bool:
        return any(_HEAD_OF[d] is head for d in self.decoders)

    def parameter_count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        """Detached copy in another precision."""
        return ModelParams(self.arch, {n: t.astype(dtype) for n, t in self._tensors.items()}, self.kind)

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def subset(self, prefix: str) -> Dict[str, Tensor]:
        return {n: t for n, t in self._tensors.items() if n.startswith(prefix)}

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison of names, order and values."""
        return list(self) == list(other) and all(
            np.array_equal(self[n].data, other[n].data) for n in self)


@dataclass
class ForwardOutput:
    """Logits of each decoder at input resolution."""
    logits_w: Optional[Tensor]
    logits_s: Optional[Tensor] = None

    def for_head(self, head: Head) -> Tensor:
        logits = self.logits_w if head is Head.PARTIAL else self.logits_s
        if logits is None:
            raise InferenceError(f"forward output has no logits for head {head.value}")
        return logits


def _init_layer(layer: LayerSpec, seed: int, dtype) -> Dict[str, Tensor]:
    fan_in = layer.c_in * layer.kernel ** 3
    gain = 2.0 / (1.0 + LEAKY_SLOPE ** 2) if layer.activated else 1.0
    std = math.sqrt(gain / fan_in)
    rng = make_rng(seed, "init", layer.prefix)
    weight = rng.standard_normal(layer.weight_shape) * std
    return {
        f"{layer.prefix}.weight": Tensor(weight.astype(dtype), requires_grad=True,
                                         name=f"{layer.prefix}.weight"),
        f"{layer.prefix}.bias": Tensor(np.zeros(layer.c_out, dtype=dtype), requires_grad=True,
                                       name=f"{layer.prefix}.bias"),
    }


def _build(arch: ArchConfig, kind: str, seed: int, dtype) -> ModelParams:
    tensors: Dict[str, Tensor] = {}
    for layer in layer_specs(arch, kind):
        tensors.update(_init_layer(layer, seed, dtype))
    params = ModelParams(arch, tensors, kind)
    logger.debug(f"Built {kind} with {len(params)} tensors, {params.parameter_count()} parameters")
    return params


def build_unet(arch: ArchConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Single-decoder U-Net ending in num_partial_classes logits."""
    return _build(arch, UNET, seed, dtype)


def build_monet(arch: ArchConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Shared encoder with a partial-task and a full-task decoder."""
    return _build(arch, MONET, seed, dtype)


def _conv(params: ModelParams, prefix: str, x: Tensor, tape: Optional[Tape]) -> Tensor:
    return conv3d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], tape=tape)


def _conv_act(params: ModelParams, prefix: str, x: Tensor, tape: Optional[Tape]) -> Tensor:
    return leaky_relu(_conv(params, prefix, x, tape), LEAKY_SLOPE, tape=tape)


def _as_patch(params: ModelParams, patch: Union[Tensor, np.ndarray]) -> Tensor:
    if isinstance(patch, Tensor):
        x = patch if patch.dtype == params.dtype else patch.astype(params.dtype)
    else:
        x = Tensor(np.asarray(patch), dtype=params.dtype)
    if x.data.ndim == 3:
        x = Tensor(x.data[None], dtype=params.dtype)
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"patch must be [1, D, H, W], got {x.shape}")
    divisor = params.arch.divisor
    if any(n % divisor for n in x.shape[1:]):
        raise ShapeError(f"patch extents {x.shape[1:]} must be divisible by 2^depth = {divisor}")
    return x


def forward(params: ModelParams, patch: Union[Tensor, np.ndarray], tape: Optional[Tape] = None,
            heads: Optional[Sequence[Head]] = None) -> ForwardOutput:
    """Run the encoder once and every requested decoder on its features."""
    x = _as_patch(params, patch)
    depth = params.arch.depth

    decoders = list(params.decoders)
    if heads is not None:
        for head in heads:
            if not params.has_head(head):
                raise InferenceError(f"{params.kind} parameters have no decoder for head {head.value}")
        decoders = [d for d in decoders if _HEAD_OF[d] in heads]

    skips: List[Tensor] = []
    h = x
    for level in range(depth):
        h = _conv_act(params, f"encoder.level{level}.conv1", h, tape)
        h = _conv_act(params, f"encoder.level{level}.conv2", h, tape)
        skips.append(h)
        h = max_pool3d(h, 2, tape=tape)
    h = _conv_act(params, "encoder.bottleneck.conv1", h, tape)
    features = _conv_act(params, "encoder.bottleneck.conv2", h, tape)

    logits: Dict[Head, Tensor] = {}
    for decoder in decoders:
        y = features
        for level in reversed(range(depth)):
            y = upsample_nearest(y, 2, tape=tape)
            y = _conv_act(params, f"{decoder}.level{level}.upconv", y, tape)
            y = concat_channels(skips[level], y, tape=tape)
            y = _conv_act(params, f"{decoder}.level{level}.conv1", y, tape)
            y = _conv_act(params, f"{decoder}.level{level}.conv2", y, tape)
        logits[_HEAD_OF[decoder]] = _conv(params, f"{decoder}.classifier", y, tape)

    return ForwardOutput(logits_w=logits.get(Head.PARTIAL), logits_s=logits.get(Head.FULL))


def transfer_params(stage1: ModelParams, monet: ModelParams) -> Tuple[ModelParams, TransferManifest]:
    """Load a stage-1 U-Net into the dual-decoder network, in place.

    The encoder is copied verbatim and the stage-1 decoder into both decoders.
    The full-task classifier keeps its fresh initialization when its class
    count differs from the partial task; it is listed under ``skipped``.
    """
    if monet.kind != MONET:
        raise TransferError("transfer target must be a dual-decoder network")
    for name in stage1:
        if not PARAM_NAME.match(name) or not (name.startswith("encoder.") or name.startswith("decoder.")):
            raise TransferError(f"unknown stage-1 parameter {name!r}")
    if not stage1.arch.same_trunk(monet.arch):
        raise TransferError(
            f"trunk mismatch: stage-1 {stage1.arch} vs target {monet.arch}")

    manifest = TransferManifest()
    for name, source in stage1.items():
        if name.startswith("encoder."):
            targets = [name]
        else:
            suffix = name[len("decoder."):]
            targets = [f"decoder_w.{suffix}", f"decoder_s.{suffix}"]
        for target in targets:
            if target not in monet:
                raise TransferError(f"target has no parameter {target!r} for {name!r}")
            dest = monet[target]
            if dest.shape != source.shape:
                if target.startswith("decoder_s.classifier."):
                    manifest.skipped.append(target)
                    continue
                raise TransferError(f"shape mismatch {name} {source.shape} -> {target} {dest.shape}")
            dest.data[...] = source.data
            manifest.copied.append((name, target))

    logger.info(f"Transferred {len(manifest.copied)} tensors, kept {len(manifest.skipped)} fresh")
    return monet, manifest
