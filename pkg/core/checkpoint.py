"""
Binary checkpoint format.

Layout (all little-endian)::

    magic    8s   b"MONETCKP"
    version  u32  1
    arch     5 x u32  base_channels, depth, kernel_size, num_partial_classes, num_full_classes
    count    u32
    count x  name_len u32, name utf-8, rank u32, dims u32[rank], f32 data
    adam     u8   0 = absent, 1 = present, followed by
             t u64, lr f64, beta1 f64, beta2 f64, epsilon f64, count u32,
             count x (name_len u32, name utf-8, m f32 data, v f32 data)

Tensors are written in ModelParams order, so save -> load -> save is byte
identical.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from core.config import ArchConfig
from core.engine import AdamState, Tensor
from core.exceptions import CheckpointError, ConfigError, ShapeError
from core.networks import PARAM_NAME, ModelParams, expected_shapes, infer_kind

logger = logging.getLogger(__name__)

MAGIC = b"MONETCKP"
VERSION = 1
_HEAD = struct.Struct("<8sI5II")
_U32 = struct.Struct("<I")
_ADAM = struct.Struct("<Q4dI")
_F32 = np.dtype("<f4")

PathLike = Union[str, Path]


def _arch_fields(arch: ArchConfig) -> Tuple[int, ...]:
    return (arch.base_channels, arch.depth, arch.kernel_size,
            arch.num_partial_classes, arch.num_full_classes)


def _name_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def encode_checkpoint(params: ModelParams, state: Optional[AdamState] = None) -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, *_arch_fields(params.arch), len(params))]
    for name, tensor in params.items():
        parts.append(_name_bytes(name))
        parts.append(_U32.pack(tensor.data.ndim))
        parts.append(struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype=_F32).tobytes())

    if state is None:
        parts.append(b"\x00")
    else:
        names = [n for n in params if n in state.m]
        parts.append(b"\x01")
        parts.append(_ADAM.pack(state.t, state.lr, state.beta1, state.beta2, state.epsilon, len(names)))
        for name in names:
            parts.append(_name_bytes(name))
            parts.append(np.ascontiguousarray(state.m[name], dtype=_F32).tobytes())
            parts.append(np.ascontiguousarray(state.v[name], dtype=_F32).tobytes())
    return b"".join(parts)


class _Reader:
    """Bounds-checked cursor over checkpoint bytes."""

    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated while reading {what}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> tuple:
        return fmt.unpack(self.take(fmt.size, what))

    def name(self) -> str:
        (length,) = self.unpack(_U32, "name length")
        try:
            return self.take(length, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{self.source}: parameter name is not UTF-8") from e

    def floats(self, shape: Tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        raw = self.take(count * _F32.itemsize, what)
        return np.frombuffer(raw, dtype=_F32).reshape(shape).astype(np.float32)


def decode_checkpoint(raw: bytes, source: str = "<bytes>",
                      arch: Optional[ArchConfig] = None) -> Tuple[ModelParams, Optional[AdamState]]:
    reader = _Reader(raw, source)
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {raw[:len(MAGIC)]!r}")
    magic, version, *fields, count = reader.unpack(_HEAD, "header")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version} (expected {VERSION})")
    try:
        stored_arch = ArchConfig(*fields)
    except (ConfigError, ValueError) as e:
        raise CheckpointError(f"{source}: invalid architecture header {fields}: {e}") from e

    tensors: Dict[str, Tensor] = {}
    for _ in range(count):
        name = reader.name()
        if not PARAM_NAME.match(name):
            raise CheckpointError(f"{source}: parameter name {name!r} violates the naming grammar")
        if name in tensors:
            raise CheckpointError(f"{source}: duplicate parameter {name!r}")
        (rank,) = reader.unpack(_U32, f"rank of {name}")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"dims of {name}"))
        tensors[name] = Tensor(reader.floats(shape, f"data of {name}"), requires_grad=True, name=name)

    (flag,) = reader.take(1, "optimizer flag")
    state = None
    if flag == 1:
        t, lr, beta1, beta2, epsilon, n_state = reader.unpack(_ADAM, "optimizer header")
        state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon, t=t)
        for _ in range(n_state):
            name = reader.name()
            if name not in tensors:
                raise CheckpointError(f"{source}: optimizer state for unknown parameter {name!r}")
            shape = tensors[name].shape
            state.m[name] = reader.floats(shape, f"first moment of {name}")
            state.v[name] = reader.floats(shape, f"second moment of {name}")
    elif flag != 0:
        raise CheckpointError(f"{source}: bad optimizer flag {flag}")
    if reader.pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - reader.pos} trailing bytes")

    kind = infer_kind(list(tensors))
    target = arch if arch is not None else stored_arch
    expected = expected_shapes(target, kind)
    for name, tensor in tensors.items():
        if name not in expected:
            raise CheckpointError(f"{source}: tensor {name!r} does not belong to a {kind} with {target}")
        if tensor.shape != expected[name]:
            raise CheckpointError(
                f"{source}: tensor {name!r} has shape {tensor.shape}, architecture expects {expected[name]}")
    try:
        params = ModelParams(target, tensors, kind)
    except ShapeError as e:
        raise CheckpointError(f"{source}: {e}") from e
    return params, state


def save_checkpoint(path: PathLike, params: ModelParams, state: Optional[AdamState] = None) -> int:
    """Write params (and optionally the optimizer state); returns the byte count."""
    path = Path(path)
    raw = encode_checkpoint(params, state)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(raw)
    logger.info(f"Saved {params.kind} checkpoint {path} ({len(params)} tensors, {len(raw)} bytes)")
    return len(raw)


def load_checkpoint(path: PathLike, arch: Optional[ArchConfig] = None) -> Tuple[ModelParams, Optional[AdamState]]:
    """Read a checkpoint; with ``arch`` every tensor is audited against that architecture."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    params, state = decode_checkpoint(raw, str(path), arch)
    logger.debug(f"Loaded {params.kind} checkpoint {path}")
    return params, state
