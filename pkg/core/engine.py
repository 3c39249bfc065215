"""
Minimal reverse-mode differentiation engine for 3D encoder-decoder networks.

Tensors wrap numpy arrays. Every differentiable op is a small ``Op`` subclass
with a ``forward`` on raw arrays and a ``backward`` that maps the output
gradient to input gradients. Ops are recorded on an explicit ``Tape`` only
when one is passed in, so inference runs record nothing and are safe to run
from several threads over the same parameters.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core.config import config
from core.exceptions import GradientError, LabelError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
LEAKY_SLOPE = 0.01
LOG_CLAMP = 1e-12

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        """Adopt an op result without copying it."""
        tensor = cls.__new__(cls)
        tensor.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        tensor.grad = None
        tensor.requires_grad = requires_grad
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        """Detached copy in another precision."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def _accumulate(self, grad: np.ndarray):
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor {self.data.shape}")
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of the ops executed during one forward pass."""

    def __init__(self):
        self.entries: List["Op"] = []

    def record(self, op: "Op"):
        self.entries.append(op)

    def produced(self, tensor: Tensor) -> bool:
        return any(op.output is tensor for op in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator["Op"]:
        return iter(self.entries)


class Op:
    """Base class for differentiable operations."""

    name = "op"

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.output: Optional[Tensor] = None

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"forward not implemented for {self.name}")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"backward not implemented for {self.name}")

    def kink_signature(self) -> Optional[np.ndarray]:
        """Discrete state that changes when an input crosses a non-differentiable point."""
        return None

    @classmethod
    def apply(cls, *inputs: Tensor, tape: Optional[Tape] = None, **kwargs) -> Tensor:
        op = cls(*inputs)
        out = op.forward(*(t.data for t in inputs), **kwargs)
        if config.runtime.debug_validation and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{cls.name} produced non-finite values")
        requires_grad = any(t.requires_grad for t in inputs)
        result = Tensor._wrap(np.asarray(out), requires_grad)
        op.output = result
        if tape is not None and requires_grad:
            tape.record(op)
        return result


def _check_spatial(x: np.ndarray, op_name: str):
    if x.ndim != 4:
        raise ShapeError(f"{op_name} expects a [C, D, H, W] tensor, got shape {x.shape}")


class Conv3d(Op):
    """Same-padded 3D cross-correlation, accumulated one kernel offset at a time."""

    name = "conv3d"

    def forward(self, x, w, b):
        _check_spatial(x, self.name)
        if w.ndim != 5 or b.ndim != 1:
            raise ShapeError(f"conv3d weight must be 5D and bias 1D, got {w.shape} and {b.shape}")
        c_out, c_in, kd, kh, kw = w.shape
        if not kd == kh == kw:
            raise ShapeError(f"conv3d kernel must be cubic, got {w.shape[2:]}")
        if kd % 2 == 0:
            raise ShapeError(f"conv3d kernel extent must be odd, got {kd}")
        if c_in != x.shape[0]:
            raise ShapeError(f"conv3d weight expects {c_in} input channels, input has {x.shape[0]}")
        if b.shape[0] != c_out:
            raise ShapeError(f"conv3d bias has {b.shape[0]} entries for {c_out} output channels")

        self.k = kd
        self.pad = kd // 2
        self.spatial = x.shape[1:]
        p = self.pad
        self.xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p))) if p else x
        self.w = w
        d, h, wd = self.spatial
        n = d * h * wd

        out = np.zeros((c_out, n), dtype=np.result_type(x, w))
        for a, bb, c, window in self._windows():
            out += w[:, :, a, bb, c] @ window.reshape(c_in, n)
        out += b[:, None]
        return out.reshape((c_out,) + self.spatial)

    def _windows(self):
        d, h, wd = self.spatial
        for a in range(self.k):
            for bb in range(self.k):
                for c in range(self.k):
                    yield a, bb, c, self.xp[:, a:a + d, bb:bb + h, c:c + wd]

    def backward(self, grad):
        c_out, c_in = self.w.shape[:2]
        d, h, wd = self.spatial
        n = d * h * wd
        g = grad.reshape(c_out, n)

        grad_b = g.sum(axis=1)
        grad_w = np.zeros_like(self.w)
        grad_xp = np.zeros_like(self.xp)
        for a, bb, c, window in self._windows():
            grad_w[:, :, a, bb, c] = g @ window.reshape(c_in, n).T
            grad_xp[:, a:a + d, bb:bb + h, c:c + wd] += (self.w[:, :, a, bb, c].T @ g).reshape(
                (c_in,) + self.spatial)
        p = self.pad
        grad_x = grad_xp[:, p:p + d, p:p + h, p:p + wd] if p else grad_xp
        return grad_x, grad_w, grad_b


class LeakyRelu(Op):
    name = "leaky_relu"

    def forward(self, x, slope=LEAKY_SLOPE):
        self.positive = x > 0
        self.slope = slope
        return np.where(self.positive, x, slope * x)

    def backward(self, grad):
        return (np.where(self.positive, grad, self.slope * grad),)

    def kink_signature(self):
        return self.positive


class MaxPool3d(Op):
    """Max over disjoint cubic windows; ties go to the first voxel in D, H, W scan order."""

    name = "max_pool3d"

    def forward(self, x, window=2):
        _check_spatial(x, self.name)
        c, d, h, w = x.shape
        if d % window or h % window or w % window:
            raise ShapeError(f"max_pool3d needs extents divisible by {window}, got {x.shape[1:]}")
        self.window = window
        self.in_shape = x.shape
        self.pooled = (c, d // window, h // window, w // window)
        blocks = self._to_blocks(x)
        self.argmax = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def _to_blocks(self, x):
        c, d2, h2, w2 = self.pooled
        k = self.window
        return x.reshape(c, d2, k, h2, k, w2, k).transpose(0, 1, 3, 5, 2, 4, 6).reshape(
            c, d2, h2, w2, k ** 3)

    def backward(self, grad):
        c, d2, h2, w2 = self.pooled
        k = self.window
        blocks = np.zeros((c, d2, h2, w2, k ** 3), dtype=grad.dtype)
        np.put_along_axis(blocks, self.argmax[..., None], grad[..., None], axis=-1)
        grad_x = blocks.reshape(c, d2, h2, w2, k, k, k).transpose(0, 1, 4, 2, 5, 3, 6).reshape(
            self.in_shape)
        return (grad_x,)

    def kink_signature(self):
        return self.argmax


class UpsampleNearest(Op):
    name = "upsample_nearest"

    def forward(self, x, factor=2):
        _check_spatial(x, self.name)
        self.factor = factor
        self.in_shape = x.shape
        out = x
        for axis in (1, 2, 3):
            out = np.repeat(out, factor, axis=axis)
        return out

    def backward(self, grad):
        c, d, h, w = self.in_shape
        f = self.factor
        return (grad.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6)),)


class ConcatChannels(Op):
    name = "concat_channels"

    def forward(self, a, b):
        _check_spatial(a, self.name)
        _check_spatial(b, self.name)
        if a.shape[1:] != b.shape[1:]:
            raise ShapeError(f"concat_channels spatial mismatch: {a.shape[1:]} vs {b.shape[1:]}")
        self.split = a.shape[0]
        return np.concatenate([a, b], axis=0)

    def backward(self, grad):
        return grad[:self.split], grad[self.split:]


class SoftmaxChannels(Op):
    name = "softmax_channels"

    def forward(self, logits):
        if logits.ndim < 1 or logits.shape[0] < 1:
            raise ShapeError(f"softmax_channels needs at least one channel, got {logits.shape}")
        shifted = logits - logits.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        self.prob = e / e.sum(axis=0, keepdims=True)
        return self.prob

    def backward(self, grad):
        p = self.prob
        return (p * (grad - (grad * p).sum(axis=0, keepdims=True)),)


class CrossEntropy(Op):
    """Voxel-mean of -log p[target]; the scalar is kept in double precision."""

    name = "cross_entropy"

    def forward(self, prob, target=None):
        target = np.asarray(target)
        if target.shape != prob.shape[1:]:
            raise ShapeError(f"target shape {target.shape} does not match prediction {prob.shape[1:]}")
        if not np.issubdtype(target.dtype, np.integer):
            raise LabelError(f"target must hold integer class ids, got {target.dtype}")
        num_classes = prob.shape[0]
        if target.size and (int(target.min()) < 0 or int(target.max()) >= num_classes):
            raise LabelError(
                f"target ids must lie in [0, {num_classes}), got [{int(target.min())}, {int(target.max())}]")
        self.index = target.astype(np.intp)[None]
        self.prob_shape = prob.shape
        self.prob_dtype = prob.dtype
        picked = np.take_along_axis(prob, self.index, axis=0)[0]
        self.unclamped = picked > LOG_CLAMP
        self.clamped = np.maximum(picked, LOG_CLAMP).astype(np.float64)
        self.count = max(picked.size, 1)
        return np.asarray(-np.log(self.clamped).sum() / self.count, dtype=np.float64)

    def backward(self, grad):
        g = float(grad)
        local = np.where(self.unclamped, -g / (self.count * self.clamped), 0.0)
        grad_prob = np.zeros(self.prob_shape, dtype=self.prob_dtype)
        np.put_along_axis(grad_prob, self.index, local[None].astype(self.prob_dtype), axis=0)
        return (grad_prob,)

    def kink_signature(self):
        return self.unclamped


class Add(Op):
    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


class Scale(Op):
    name = "scale"

    def forward(self, x, factor=1.0):
        self.factor = factor
        return x * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Sum(Op):
    name = "sum"

    def forward(self, x):
        self.in_shape = x.shape
        self.in_dtype = x.dtype
        return np.asarray(x.sum(dtype=np.float64), dtype=np.float64)

    def backward(self, grad):
        return (np.full(self.in_shape, float(grad), dtype=self.in_dtype),)


class WeightedSum(Op):
    """Contraction with a constant array; turns any op output into a scalar probe."""

    name = "weighted_sum"

    def forward(self, x, weights=None):
        weights = np.asarray(weights)
        if weights.shape != x.shape:
            raise ShapeError(f"weights shape {weights.shape} does not match {x.shape}")
        self.weights = weights
        return np.asarray((x.astype(np.float64) * weights).sum(), dtype=np.float64)

    def backward(self, grad):
        return ((float(grad) * self.weights).astype(self.inputs[0].dtype),)


_OPS: Dict[str, type] = {
    cls.name: cls
    for cls in (Conv3d, LeakyRelu, MaxPool3d, UpsampleNearest, ConcatChannels, SoftmaxChannels,
                CrossEntropy, Add, Scale, Sum, WeightedSum)
}


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return Conv3d.apply(x, weight, bias, tape=tape)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE, tape: Optional[Tape] = None) -> Tensor:
    return LeakyRelu.apply(x, tape=tape, slope=slope)


def max_pool3d(x: Tensor, window: int = 2, tape: Optional[Tape] = None) -> Tensor:
    return MaxPool3d.apply(x, tape=tape, window=window)


def upsample_nearest(x: Tensor, factor: int = 2, tape: Optional[Tape] = None) -> Tensor:
    return UpsampleNearest.apply(x, tape=tape, factor=factor)


def concat_channels(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return ConcatChannels.apply(a, b, tape=tape)


def softmax_channels(logits: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return SoftmaxChannels.apply(logits, tape=tape)


def cross_entropy(prob: Tensor, target: np.ndarray, tape: Optional[Tape] = None) -> Tensor:
    return CrossEntropy.apply(prob, tape=tape, target=target)


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return Add.apply(a, b, tape=tape)


def scale(x: Tensor, factor: float, tape: Optional[Tape] = None) -> Tensor:
    return Scale.apply(x, tape=tape, factor=factor)


def tensor_sum(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return Sum.apply(x, tape=tape)


def weighted_sum(x: Tensor, weights: np.ndarray, tape: Optional[Tape] = None) -> Tensor:
    return WeightedSum.apply(x, tape=tape, weights=weights)


def backward(loss: Tensor, tape: Tape):
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise GradientError("loss was not produced under this tape")

    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape.entries):
        grad = op.output.grad
        if grad is None:
            continue
        for tensor, input_grad in zip(op.inputs, op.backward(grad)):
            if input_grad is not None and tensor.requires_grad:
                tensor._accumulate(input_grad)


@dataclass
class AdamState:
    """Moment buffers keyed by parameter name."""
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: Optional[float] = None):
    """One bias-corrected Adam update of every parameter, in place."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise GradientError(f"missing gradient for {missing[0]}" +
                            (f" and {len(missing) - 1} more" if len(missing) > 1 else ""))

    lr = state.lr if lr is None else lr
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t

    for name, p in params.items():
        g = p.grad.astype(p.data.dtype, copy=False)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient of {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.data.shape:
            raise ShapeError(f"Adam state for {name} has shape {m.shape}, parameter {p.data.shape}")

        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)

        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


@dataclass
class GradCheckResult:
    """Outcome of comparing analytic and central-difference gradients."""
    name: str
    max_rel_error: float
    checked: int
    resampled: int
    tolerance: float
    worst: Optional[Tuple[str, int]] = None

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def _kink_crossed(tape_plus: Tape, tape_minus: Tape) -> bool:
    for op_plus, op_minus in zip(tape_plus.entries, tape_minus.entries):
        sig_plus = op_plus.kink_signature()
        if sig_plus is not None and not np.array_equal(sig_plus, op_minus.kink_signature()):
            return True
    return False


def finite_diff_check(
    fn: Callable[[Tape], Tensor],
    inputs: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    samples_per_tensor: Optional[int] = None,
    seed: int = 0,
    name: str = "check",
    abs_floor: float = 1e-4,
) -> GradCheckResult:
    """Compare backward() against central differences for the tensors in ``inputs``.

    ``fn`` must rebuild the scalar loss from the current input data each time it
    is called. Entries whose +-h probes land on different sides of a kink
    (LeakyReLU sign, max-pool winner, log clamp) are replaced by another entry.
    The relative error is |a - n| / max(|a|, |n|, abs_floor).
    """
    for key, tensor in inputs.items():
        if tensor.dtype != np.float64:
            raise GradientError(f"finite_diff_check needs double precision, {key} is {tensor.dtype}")
        if not tensor.requires_grad:
            raise GradientError(f"{key} does not require grad")

    for tensor in inputs.values():
        tensor.zero_grad()
    tape = Tape()
    loss = fn(tape)
    backward(loss, tape)
    analytic = {key: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
                for key, t in inputs.items()}

    rng = np.random.default_rng(seed)
    max_err = 0.0
    worst = None
    checked = 0
    resampled = 0

    for key, tensor in inputs.items():
        flat = tensor.data.reshape(-1)
        if samples_per_tensor is None or samples_per_tensor >= flat.size:
            candidates = list(range(flat.size))
            wanted = flat.size
        else:
            candidates = [int(i) for i in rng.permutation(flat.size)]
            wanted = samples_per_tensor

        done = 0
        for idx in candidates:
            if done >= wanted:
                break
            original = flat[idx]
            flat[idx] = original + h
            tape_plus = Tape()
            f_plus = fn(tape_plus).item()
            flat[idx] = original - h
            tape_minus = Tape()
            f_minus = fn(tape_minus).item()
            flat[idx] = original

            if _kink_crossed(tape_plus, tape_minus):
                resampled += 1
                continue

            numeric = (f_plus - f_minus) / (2 * h)
            exact = float(analytic[key].reshape(-1)[idx])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), abs_floor)
            if err > max_err:
                max_err = err
                worst = (key, idx)
            done += 1
            checked += 1

    for tensor in inputs.values():
        tensor.zero_grad()

    result = GradCheckResult(name=name, max_rel_error=max_err, checked=checked,
                             resampled=resampled, tolerance=tolerance, worst=worst)
    logger.debug(f"Gradient check {name}: max rel err {max_err:.3e} over {checked} entries "
                 f"({resampled} resampled)")
    return result


@contextmanager
def corrupted_backward(op_name: str, factor: float = 1.5):
    """Temporarily scale every input gradient of one op (negative control for gradient checks).

    Patches the op class, so it affects all threads while active.
    """
    if op_name not in _OPS:
        raise KeyError(f"unknown op {op_name!r}; known: {sorted(_OPS)}")
    cls = _OPS[op_name]
    original = cls.backward

    def broken(self, grad):
        return tuple(None if g is None else g * factor for g in original(self, grad))

    cls.backward = broken
    logger.warning(f"Backward rule of {op_name} corrupted by factor {factor}")
    try:
        yield
    finally:
        cls.backward = original
