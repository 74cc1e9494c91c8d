# supernet_search/autodiff.py
"""
Reverse-mode differentiable arrays on top of numpy.

Every primitive is a `Function` subclass with a numpy `forward` and a `backward`
returning one gradient per input. `Function.apply` records the call on the
active `Tape`; `backward(loss, tape)` replays the records in reverse creation
order and leaves adjoints on the leaves.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from supernet_search.errors import (
    AlignmentError,
    AxisRangeError,
    DimensionError,
    EvaluationError,
    LabelRangeError,
    PreconditionError,
    StaleTapeError,
    UnsupportedKernelError,
    WindowRangeError,
)

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float64
_state = threading.local()

Scalar = Union[int, float]
ArrayLike = Union["DiffArray", np.ndarray, Scalar, Sequence[float]]
Window = Optional[Tuple[int, int]]


def set_default_dtype(name: str) -> None:
    """Select the numeric mode ("float32" for training runs, "float64" for checks)."""
    global _default_dtype
    if name not in DTYPES:
        raise PreconditionError(f"Unknown dtype {name!r}; expected one of {sorted(DTYPES)}")
    _default_dtype = DTYPES[name]


def get_default_dtype() -> type:
    return _default_dtype


class DiffArray:
    """
    Dense real tensor with an optional adjoint.

    Leaves are created by the user (parameters, inputs); every other DiffArray is
    the output of a primitive and remembers the `Function` that produced it while
    its tape is alive.
    """

    __array_priority__ = 100

    def __init__(
        self,
        values: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[type] = None,
    ):
        self.values = np.array(values, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.adjoint: Optional[np.ndarray] = None
        self.name = name
        self._creator: Optional["Function"] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "DiffArray":
        out = cls.__new__(cls)
        out.values = np.asarray(values)
        out.requires_grad = requires_grad
        out.adjoint = None
        out.name = None
        out._creator = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def detach(self) -> "DiffArray":
        return DiffArray(self.values.copy(), requires_grad=False, dtype=self.values.dtype)

    def zero_adjoint(self) -> None:
        self.adjoint = None

    def __add__(self, other: ArrayLike) -> "DiffArray":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "DiffArray":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "DiffArray":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "DiffArray":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "DiffArray":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "DiffArray":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "DiffArray":
        return div(self, other)

    def __neg__(self) -> "DiffArray":
        return neg(self)

    def __matmul__(self, other: ArrayLike) -> "DiffArray":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return (
            f"DiffArray(shape={self.shape}, dtype={self.dtype}{label}, "
            f"requires_grad={self.requires_grad})"
        )


def as_diff(value: ArrayLike) -> DiffArray:
    """Wrap constants; DiffArrays pass through untouched."""
    if isinstance(value, DiffArray):
        return value
    return DiffArray(value, requires_grad=False)


def parameter(values: Any, name: Optional[str] = None) -> DiffArray:
    return DiffArray(values, requires_grad=True, name=name)


class TapeRecord:
    __slots__ = ("function", "output")

    def __init__(self, function: "Function", output: DiffArray):
        self.function = function
        self.output = output


class Tape:
    """
    Ordered record of the primitives applied while the tape is active.

    Usage:
        with Tape() as tape:
            loss = model(x)
        backward(loss, tape)
    """

    def __init__(self) -> None:
        self.records: List[TapeRecord] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, function: "Function", output: DiffArray) -> None:
        if self.consumed:
            raise StaleTapeError("Cannot record on a tape that was already consumed by backward")
        self.records.append(TapeRecord(function, output))
        output._creator = function
        output._tape = self


def _tape_stack() -> List[Tape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class OutputTrace:
    """Running count of primitive calls and output elements."""

    def __init__(self) -> None:
        self.calls = 0
        self.elements = 0


@contextmanager
def trace_outputs() -> Iterator[OutputTrace]:
    """Count the extents of every primitive output produced inside the block."""
    if not hasattr(_state, "traces"):
        _state.traces = []
    trace = OutputTrace()
    _state.traces.append(trace)
    try:
        yield trace
    finally:
        _state.traces.remove(trace)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run primitives without recording, even inside an active tape."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


class Function:
    """
    Base class for differentiable primitives.

    `forward` receives the numpy values of the inputs (plus keyword options) and
    may stash whatever `backward` needs on `self`. `backward` receives the
    adjoint of the output and returns one array (or None) per input.
    """

    name = "function"

    def __init__(self, *inputs: DiffArray):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    def needs_grad(self, index: int) -> bool:
        return self.inputs[index].requires_grad

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs: Any) -> DiffArray:
        arrays = tuple(as_diff(x) for x in inputs)
        func = cls(*arrays)
        out_values = func.forward(*(x.values for x in arrays), **kwargs)

        for trace in getattr(_state, "traces", ()):
            trace.calls += 1
            trace.elements += int(np.size(out_values))

        tape = active_tape()
        requires_grad = tape is not None and any(x.requires_grad for x in arrays)
        out = DiffArray._wrap(out_values, requires_grad)
        if requires_grad:
            tape.record(func, out)
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out the axes numpy broadcasting added or stretched."""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(to_shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return np.asarray(grad)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisRangeError(f"Axis {axis} out of range for an array of rank {ndim}")
    return axis % ndim


def _normalize_axes(axis: Union[None, int, Sequence[int]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(sorted(_check_axis(a, ndim) for a in axis))


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return (
            Function.unbroadcast(grad, self.shapes[0]),
            Function.unbroadcast(grad, self.shapes[1]),
        )


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return (
            Function.unbroadcast(grad, self.shapes[0]),
            Function.unbroadcast(-grad, self.shapes[1]),
        )


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            Function.unbroadcast(grad * self.b, self.a.shape),
            Function.unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    name = "div"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return (
            Function.unbroadcast(grad_a, self.a.shape),
            Function.unbroadcast(grad_b, self.b.shape),
        )


class Neg(Function):
    name = "neg"

    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Scale(Function):
    name = "scale"

    def forward(self, x, factor=1.0):
        self.factor = factor
        return x * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Relu(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


class Gelu(Function):
    """Exact GELU, x·Φ(x)."""

    name = "gelu"

    def forward(self, x):
        self.x = x
        self.cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
        return (x * self.cdf).astype(x.dtype, copy=False)

    def backward(self, grad):
        pdf = np.exp(-0.5 * self.x * self.x) / np.sqrt(2.0 * np.pi)
        return (grad * (self.cdf + self.x * pdf),)


class Softplus(Function):
    name = "softplus"

    def forward(self, x):
        self.x = x
        return np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * special.expit(self.x),)


class StraightThrough(Function):
    """Forward emits `hard`; the adjoint flows unchanged into the soft input."""

    name = "straight_through"

    def forward(self, soft, hard=None):
        if hard is None or np.shape(hard) != soft.shape:
            raise DimensionError(f"Hard value shape {np.shape(hard)} != soft shape {soft.shape}")
        return np.array(hard, dtype=soft.dtype)

    def backward(self, grad):
        return (grad,)


# ---------------------------------------------------------------------------
# Linear algebra and shape
# ---------------------------------------------------------------------------


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"Cannot multiply shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = grad_b = None
        if self.needs_grad(0):
            grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
            grad_a = Function.unbroadcast(grad_a, self.a.shape)
        if self.needs_grad(1):
            grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
            grad_b = Function.unbroadcast(grad_b, self.b.shape)
        return grad_a, grad_b


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes=None):
        axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
        if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
            raise AxisRangeError(f"Invalid permutation {axes} for rank {x.ndim}")
        self.inverse = tuple(np.argsort([a % x.ndim for a in axes]))
        return np.transpose(x, axes)

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape=None):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as e:
            raise DimensionError(f"Cannot reshape {x.shape} into {shape}: {e}") from e

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Sum(Function):
    name = "sum"

    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape),)


class Mean(Function):
    name = "mean"

    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([x.shape[a] for a in self.axes])) if self.axes else 1
        return np.asarray(x.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad / self.count, self.shape),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=0):
        if not arrays:
            raise DimensionError("concat needs at least one array")
        self.axis = _check_axis(axis, arrays[0].ndim)
        self.bounds = np.cumsum([a.shape[self.axis] for a in arrays])[:-1]
        try:
            return np.concatenate(arrays, axis=self.axis)
        except ValueError as e:
            shapes = [a.shape for a in arrays]
            raise DimensionError(f"Cannot concatenate shapes {shapes}: {e}") from e

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


# ---------------------------------------------------------------------------
# Padding and slicing
# ---------------------------------------------------------------------------


def _alignments(alignment: Union[str, Sequence[str]], ndim: int) -> Tuple[str, ...]:
    if isinstance(alignment, str):
        alignment = (alignment,) * ndim
    alignment = tuple(alignment)
    if len(alignment) != ndim:
        raise DimensionError(f"Expected {ndim} alignments, got {len(alignment)}")
    for mode in alignment:
        if mode not in ("leading", "centered"):
            raise AlignmentError(f"Unknown alignment {mode!r}")
    return alignment


class ZeroPad(Function):
    name = "zero_pad"

    def forward(self, x, target_shape=None, alignment="leading"):
        target_shape = tuple(int(t) for t in target_shape)
        if len(target_shape) != x.ndim:
            raise DimensionError(f"Target shape {target_shape} has wrong rank for {x.shape}")
        modes = _alignments(alignment, x.ndim)
        index = []
        for axis, (source, target, mode) in enumerate(zip(x.shape, target_shape, modes)):
            gap = target - source
            if gap < 0:
                raise DimensionError(
                    f"Cannot pad axis {axis} from {source} down to {target} "
                    f"({x.shape} -> {target_shape})"
                )
            if mode == "centered" and gap % 2:
                raise AlignmentError(
                    f"Centered padding of axis {axis} from {source} to {target} leaves an odd gap"
                )
            start = gap // 2 if mode == "centered" else 0
            index.append(slice(start, start + source))
        self.index = tuple(index)
        out = np.zeros(target_shape, dtype=x.dtype)
        out[self.index] = x
        return out

    def backward(self, grad):
        return (grad[self.index],)


class SliceView(Function):
    name = "slice_view"

    def forward(self, x, windows=()):
        windows = tuple(windows)
        if len(windows) > x.ndim:
            raise WindowRangeError(f"{len(windows)} windows given for an array of rank {x.ndim}")
        index = []
        for axis, extent in enumerate(x.shape):
            window = windows[axis] if axis < len(windows) else None
            if window is None:
                index.append(slice(0, extent))
                continue
            start, stop = int(window[0]), int(window[1])
            if not 0 <= start < stop <= extent:
                raise WindowRangeError(
                    f"Window [{start}, {stop}) out of bounds on axis {axis} with extent {extent}"
                )
            index.append(slice(start, stop))
        self.index = tuple(index)
        self.shape = x.shape
        return x[self.index].copy()

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[self.index] = grad
        return (out,)


# ---------------------------------------------------------------------------
# Neural network primitives
# ---------------------------------------------------------------------------


class Softmax(Function):
    name = "softmax"

    def forward(self, x, axis=-1):
        self.axis = _check_axis(axis, x.ndim)
        shifted = x - x.max(axis=self.axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=self.axis, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


class CrossEntropy(Function):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""

    name = "cross_entropy"

    def forward(self, logits, labels=None):
        labels = np.asarray(labels)
        if logits.ndim != 2:
            raise DimensionError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
        if labels.shape != (logits.shape[0],):
            raise DimensionError(
                f"Labels shape {labels.shape} does not match logits {logits.shape}"
            )
        classes = logits.shape[1]
        if labels.size and (labels.min() < 0 or labels.max() >= classes):
            raise LabelRangeError(
                f"Label index {int(labels.max())} outside [0, {classes}) for {classes} classes"
            )
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        total = e.sum(axis=1, keepdims=True)
        self.probs = e / total
        self.labels = labels.astype(np.int64)
        rows = np.arange(labels.shape[0])
        nll = np.log(total[:, 0]) - shifted[rows, self.labels]
        return np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(self, grad):
        n = self.labels.shape[0]
        g = self.probs.copy()
        g[np.arange(n), self.labels] -= 1.0
        return (g * (grad / n),)


class Embedding(Function):
    name = "embedding"

    def forward(self, table, ids=None):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise LabelRangeError(f"Token id outside [0, {table.shape[0]})")
        self.ids = ids
        self.shape = table.shape
        return table[ids]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.ids, grad)
        return (out,)


class NormalizeFeatures(Function):
    """
    Standardize over `axes` (per sample, per channel) then apply a learned
    per-channel affine. No running statistics are kept.
    """

    name = "normalize_features"

    def forward(self, x, gamma, beta, axes=(-1,), channel_axis=-1, eps=1e-5):
        self.axes = _normalize_axes(axes, x.ndim)
        self.channel_axis = _check_axis(channel_axis, x.ndim)
        channels = x.shape[self.channel_axis]
        if gamma.shape != (channels,) or beta.shape != (channels,):
            raise DimensionError(
                f"Affine shapes {gamma.shape}/{beta.shape} do not match "
                f"{channels} channels of {x.shape}"
            )
        affine_shape = [1] * x.ndim
        affine_shape[self.channel_axis] = channels
        self.gamma = gamma.reshape(affine_shape)
        centered = x - x.mean(axis=self.axes, keepdims=True)
        var = (centered * centered).mean(axis=self.axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = centered * self.inv_std
        return self.xhat * self.gamma + beta.reshape(affine_shape)

    def backward(self, grad):
        count = int(np.prod([self.xhat.shape[a] for a in self.axes]))
        other = tuple(a for a in range(grad.ndim) if a != self.channel_axis)
        grad_xhat = grad * self.gamma
        grad_x = (self.inv_std / count) * (
            count * grad_xhat
            - grad_xhat.sum(axis=self.axes, keepdims=True)
            - self.xhat * (grad_xhat * self.xhat).sum(axis=self.axes, keepdims=True)
        )
        grad_gamma = (grad * self.xhat).sum(axis=other)
        grad_beta = grad.sum(axis=other)
        return grad_x, grad_gamma, grad_beta


class Conv2d(Function):
    """
    2-D cross-correlation via im2col windows.

    The input is padded, unfolded into [N, C, H', W', k, k] windows and
    contracted with the kernel. `groups == C_in` takes the depthwise path.
    """

    name = "conv2d"

    def forward(self, x, kernel, stride=1, dilation=1, padding=0, groups=1):
        if x.ndim != 4 or kernel.ndim != 4:
            raise DimensionError(
                f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
            )
        n, c_in, h, w = x.shape
        c_out, c_group, kh, kw = kernel.shape
        if kh != kw or kh % 2 == 0:
            raise UnsupportedKernelError(f"Kernel must be square with odd extent, got {kh}x{kw}")
        if groups < 1 or c_in != c_group * groups or c_out % groups:
            raise DimensionError(
                f"Input channels {c_in} incompatible with kernel {kernel.shape} and {groups} groups"
            )
        if stride < 1 or dilation < 1 or padding < 0:
            raise DimensionError(f"Invalid stride={stride}, dilation={dilation}, padding={padding}")
        span = dilation * (kh - 1) + 1
        if h + 2 * padding - span < 0 or w + 2 * padding - span < 0:
            raise DimensionError(
                f"Input {h}x{w} with padding {padding} is smaller than "
                f"the dilated kernel span {span}"
            )
        self.x_shape = x.shape
        self.kernel = kernel
        self.stride, self.dilation, self.padding, self.groups = stride, dilation, padding, groups

        padded = x
        if padding:
            padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        self.padded_shape = padded.shape
        windows = sliding_window_view(padded, (span, span), axis=(2, 3))
        self.cols = windows[:, :, ::stride, ::stride, ::dilation, ::dilation]
        self.out_hw = self.cols.shape[2:4]

        if groups == 1:
            out = np.tensordot(self.cols, kernel, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        elif self._depthwise:
            out = np.einsum("nchwij,cij->nchw", self.cols, kernel[:, 0])
        else:
            out = np.concatenate(
                [
                    np.tensordot(
                        self.cols[:, cs], kernel[os], axes=([1, 4, 5], [1, 2, 3])
                    ).transpose(0, 3, 1, 2)
                    for cs, os in self._group_slices()
                ],
                axis=1,
            )
        return np.ascontiguousarray(out)

    @property
    def _depthwise(self) -> bool:
        return self.groups == self.x_shape[1] and self.kernel.shape[0] == self.groups

    def _group_slices(self):
        c_in = self.x_shape[1] // self.groups
        c_out = self.kernel.shape[0] // self.groups
        for g in range(self.groups):
            yield slice(g * c_in, (g + 1) * c_in), slice(g * c_out, (g + 1) * c_out)

    def backward(self, grad):
        grad_x = grad_kernel = None
        if self.groups == 1:
            if self.needs_grad(1):
                grad_kernel = np.tensordot(grad, self.cols, axes=([0, 2, 3], [0, 2, 3]))
            if self.needs_grad(0):
                grad_cols = np.tensordot(grad, self.kernel, axes=([1], [0]))
                grad_cols = grad_cols.transpose(0, 3, 1, 2, 4, 5)
        elif self._depthwise:
            if self.needs_grad(1):
                grad_kernel = np.einsum("nchw,nchwij->cij", grad, self.cols)[:, None]
            if self.needs_grad(0):
                grad_cols = np.einsum("nchw,cij->nchwij", grad, self.kernel[:, 0])
        else:
            grad_kernel = np.zeros_like(self.kernel)
            grad_cols = np.zeros(self.cols.shape, dtype=grad.dtype)
            for cs, os in self._group_slices():
                grad_kernel[os] = np.tensordot(
                    grad[:, os], self.cols[:, cs], axes=([0, 2, 3], [0, 2, 3])
                )
                cols = np.tensordot(grad[:, os], self.kernel[os], axes=([1], [0]))
                grad_cols[:, cs] = cols.transpose(0, 3, 1, 2, 4, 5)
        if self.needs_grad(0):
            grad_x = self._col2im(grad_cols)
        return grad_x, grad_kernel

    def _col2im(self, grad_cols: np.ndarray) -> np.ndarray:
        h_out, w_out = self.out_hw
        k = self.kernel.shape[-1]
        s, d, p = self.stride, self.dilation, self.padding
        padded = np.zeros(self.padded_shape, dtype=grad_cols.dtype)
        for i in range(k):
            for j in range(k):
                rows = slice(i * d, i * d + s * (h_out - 1) + 1, s)
                cols = slice(j * d, j * d + s * (w_out - 1) + 1, s)
                padded[:, :, rows, cols] += grad_cols[:, :, :, :, i, j]
        h, w = self.x_shape[2:]
        return padded[:, :, p : p + h, p : p + w]


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> DiffArray:
    return Add.apply(a, b)


def sub(a: ArrayLike, b: ArrayLike) -> DiffArray:
    return Sub.apply(a, b)


def mul(a: ArrayLike, b: ArrayLike) -> DiffArray:
    return Mul.apply(a, b)


def div(a: ArrayLike, b: ArrayLike) -> DiffArray:
    return Div.apply(a, b)


def neg(x: ArrayLike) -> DiffArray:
    return Neg.apply(x)


def scale(x: ArrayLike, factor: float) -> DiffArray:
    return Scale.apply(x, factor=factor)


def relu(x: ArrayLike) -> DiffArray:
    return Relu.apply(x)


def gelu(x: ArrayLike) -> DiffArray:
    return Gelu.apply(x)


def softplus(x: ArrayLike) -> DiffArray:
    return Softplus.apply(x)


def straight_through(soft: DiffArray, hard: np.ndarray) -> DiffArray:
    return StraightThrough.apply(soft, hard=hard)


def matmul(a: ArrayLike, b: ArrayLike) -> DiffArray:
    return MatMul.apply(a, b)


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> DiffArray:
    return Transpose.apply(x, axes=axes)


def reshape(x: ArrayLike, shape: Sequence[int]) -> DiffArray:
    return Reshape.apply(x, shape=tuple(shape))


def reduce_sum(x: ArrayLike, axis=None, keepdims: bool = False) -> DiffArray:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def reduce_mean(x: ArrayLike, axis=None, keepdims: bool = False) -> DiffArray:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def concat(arrays: Sequence[ArrayLike], axis: int = 0) -> DiffArray:
    return Concat.apply(*arrays, axis=axis)


def zero_pad(
    x: ArrayLike,
    target_shape: Sequence[int],
    alignment: Union[str, Sequence[str]] = "leading",
) -> DiffArray:
    return ZeroPad.apply(x, target_shape=tuple(target_shape), alignment=alignment)


def slice_view(x: ArrayLike, windows: Sequence[Window]) -> DiffArray:
    return SliceView.apply(x, windows=tuple(windows))


def softmax(x: ArrayLike, axis: int = -1) -> DiffArray:
    return Softmax.apply(x, axis=axis)


def cross_entropy(logits: ArrayLike, labels: np.ndarray) -> DiffArray:
    return CrossEntropy.apply(logits, labels=labels)


def embedding(table: ArrayLike, ids: np.ndarray) -> DiffArray:
    return Embedding.apply(table, ids=ids)


def normalize_features(
    x: ArrayLike,
    gamma: ArrayLike,
    beta: ArrayLike,
    axes: Sequence[int] = (-1,),
    channel_axis: int = -1,
    eps: float = 1e-5,
) -> DiffArray:
    return NormalizeFeatures.apply(
        x, gamma, beta, axes=tuple(axes), channel_axis=channel_axis, eps=eps
    )


def conv2d(
    x: ArrayLike,
    kernel: ArrayLike,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> DiffArray:
    return Conv2d.apply(x, kernel, stride=stride, dilation=dilation, padding=padding, groups=groups)


# ---------------------------------------------------------------------------
# Backward pass and gradient verification
# ---------------------------------------------------------------------------


def backward(loss: DiffArray, tape: Tape) -> None:
    """
    Accumulate d(loss)/d(leaf) into the adjoint of every requires_grad leaf.

    The tape is consumed: its records are dropped and a second call raises
    StaleTapeError.
    """
    if tape.consumed:
        raise StaleTapeError("Tape was already consumed; record a new forward pass before backward")
    if loss.size != 1:
        raise DimensionError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise PreconditionError("Loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.values)}
    for record in reversed(tape.records):
        grad = grads.pop(id(record.output), None)
        if grad is None:
            continue
        function = record.function
        input_grads = function.backward(grad)
        for inp, g in zip(function.inputs, input_grads):
            if g is None or not inp.requires_grad:
                continue
            if inp._creator is None:
                if inp.adjoint is None:
                    inp.adjoint = np.array(g, dtype=inp.values.dtype)
                else:
                    inp.adjoint = inp.adjoint + g
            elif inp._tape is tape:
                held = grads.get(id(inp))
                grads[id(inp)] = g if held is None else held + g

    tape.consumed = True
    for record in tape.records:
        record.function.inputs = ()
    tape.records = []


def _evaluate(f: Callable[[List[DiffArray]], DiffArray], params: List[DiffArray]) -> float:
    with no_grad():
        value = f(params)
    value = float(np.asarray(as_diff(value).values).reshape(-1)[0])
    if not np.isfinite(value):
        raise EvaluationError(f"Objective evaluated to a non-finite value {value}")
    return value


def grad_check(
    f: Callable[[List[DiffArray]], DiffArray],
    params: Sequence[DiffArray],
    eps: float = 1e-5,
) -> float:
    """
    Compare backward() against central finite differences.

    Args:
        f: Callable taking the parameter list and returning a scalar DiffArray
        params: Leaf parameters with requires_grad set
        eps: Finite-difference step, within [1e-7, 1e-3]

    Returns:
        Max over all coordinates of |analytic - numeric| / max(1, |analytic|)

    Raises:
        PreconditionError: eps outside the supported range
        EvaluationError: f produced a non-finite value
    """
    if not 1e-7 <= eps <= 1e-3:
        raise PreconditionError(f"Finite-difference step {eps} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.adjoint = None

    with Tape() as tape:
        loss = f(params)
    if not np.all(np.isfinite(loss.values)):
        raise EvaluationError(f"Objective evaluated to a non-finite value {loss.values}")
    backward(loss, tape)
    analytic = [np.zeros_like(p.values) if p.adjoint is None else p.adjoint.copy() for p in params]

    worst = 0.0
    for p, exact in zip(params, analytic):
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = _evaluate(f, params)
            flat[i] = original - eps
            minus = _evaluate(f, params)
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = float(exact.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        p.adjoint = None
    logger.debug("grad_check over %d parameters: max rel err %.3e", len(params), worst)
    return worst
