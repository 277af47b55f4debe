"""Dense tensors and differentiable primitives with a reverse-mode tape.

Feature maps use the axis order N x C x D x H x W. Every primitive is a
``Function`` subclass operating on numpy arrays; applying it inside an active
``Tape`` records a node so that ``backward`` can replay the computation in
reverse.

Example:
    with Tape() as tape:
        y = leaky_relu(conv3d(x, w, b, padding=1))
        loss = y.sum()
    backward(tape, loss)
"""

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from filmseg import FilmSegError

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]
Scalar = Union[int, float]

SPATIAL_AXES = ("D", "H", "W")

_state = threading.local()


class TensorShapeError(FilmSegError):
    """Error raised when tensor shapes do not fit an operation."""

    def __init__(self, message: str, axis: Optional[str] = None):
        super().__init__(message)
        self.axis = axis


class TapeError(FilmSegError):
    """Error raised when the tape cannot differentiate a loss."""
    pass


def default_dtype() -> type:
    """Return the floating point type new tensors are stored in."""
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage type of new tensors on this thread.

    Training runs in float32. Gradient verification switches to float64 so
    that central differences are not dominated by rounding.
    """
    previous = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


def _tape_stack() -> List["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=default_dtype())
        if any(dim < 1 for dim in self.data.shape):
            raise TensorShapeError(f"Tensor dimensions must be >= 1, got {self.data.shape}")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def __add__(self, other) -> "Tensor":
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other) -> "Tensor":
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other) -> "Tensor":
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other) -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other) -> "Tensor":
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other) -> "Tensor":
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other) -> "Tensor":
        return Div.apply(as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return Mul.apply(self, as_tensor(-1.0))

    def __getitem__(self, key) -> "Tensor":
        return Slice.apply(self, key=key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis) * (1.0 / count)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    """One recorded primitive application."""
    function: "Function"
    inputs: Tuple[Tensor, ...]
    output: Tensor


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Nodes are appended in execution order, so every node's inputs are either
    leaves or outputs of earlier nodes.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, function: "Function", inputs: Sequence[Tensor], output: Tensor) -> None:
        self.nodes.append(Node(function, tuple(inputs), output))


class Function:
    """Base class for differentiable primitives.

    ``forward`` receives the input arrays and returns the output array,
    saving whatever ``backward`` needs. ``backward`` receives the gradient
    of the loss with respect to the output and returns one gradient (or
    None) per input.
    """

    name = "function"

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        function = cls()
        output = Tensor(function.forward(*(t.data for t in inputs), **kwargs))
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in inputs):
            output.requires_grad = True
            tape.record(function, inputs, output)
        return output


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (_unbroadcast(grad * self.b, self.a.shape),
                _unbroadcast(grad * self.a, self.b.shape))


class Div(Function):
    name = "div"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class Sum(Function):
    name = "sum"

    def forward(self, x, *, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = tuple(a % len(self.shape) for a in np.atleast_1d(self.axis))
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Slice(Function):
    name = "slice"

    def forward(self, x, *, key):
        self.shape, self.dtype, self.key = x.shape, x.dtype, key
        return np.array(x[key])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=self.dtype)
        full[self.key] = grad
        return (full,)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=1):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Linear(Function):
    name = "linear"

    def forward(self, x, weight, bias):
        self.x, self.weight = x, weight
        return x @ weight.T + bias

    def backward(self, grad):
        grad_2d = np.atleast_2d(grad)
        x_2d = np.atleast_2d(self.x)
        grad_x = (grad_2d @ self.weight).reshape(self.x.shape)
        grad_weight = grad_2d.T @ x_2d
        grad_bias = grad_2d.sum(axis=0)
        return grad_x, grad_weight, grad_bias


class LeakyReLU(Function):
    name = "leaky_relu"

    def forward(self, x, *, slope):
        # subgradient at exactly zero is 1
        self.multiplier = np.where(x >= 0, 1.0, slope).astype(x.dtype)
        return x * self.multiplier

    def backward(self, grad):
        return (grad * self.multiplier,)


class SoftmaxChannel(Function):
    name = "softmax_channel"

    def forward(self, x):
        shifted = x - x.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        self.probs = exp / exp.sum(axis=1, keepdims=True)
        return self.probs

    def backward(self, grad):
        inner = (grad * self.probs).sum(axis=1, keepdims=True)
        return (self.probs * (grad - inner),)


class LogSoftmaxChannel(Function):
    name = "log_softmax_channel"

    def forward(self, x):
        shifted = x - x.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        total = exp.sum(axis=1, keepdims=True)
        self.probs = exp / total
        return shifted - np.log(total)

    def backward(self, grad):
        return (grad - self.probs * grad.sum(axis=1, keepdims=True),)


class InstanceNorm3d(Function):
    name = "instance_norm"

    def forward(self, x, gain, shift, *, epsilon):
        axes = (2, 3, 4)
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + epsilon)
        self.xhat = centered * self.inv_std
        self.gain = gain
        return self.xhat * gain.reshape(1, -1, 1, 1, 1) + shift.reshape(1, -1, 1, 1, 1)

    def backward(self, grad):
        axes = (2, 3, 4)
        count = self.xhat[0, 0].size
        grad_xhat = grad * self.gain.reshape(1, -1, 1, 1, 1)
        grad_x = (self.inv_std / count) * (
            count * grad_xhat
            - grad_xhat.sum(axis=axes, keepdims=True)
            - self.xhat * (grad_xhat * self.xhat).sum(axis=axes, keepdims=True)
        )
        grad_gain = (grad * self.xhat).sum(axis=(0, 2, 3, 4))
        grad_shift = grad.sum(axis=(0, 2, 3, 4))
        return grad_x, grad_gain, grad_shift


class Modulate(Function):
    """Per-channel affine ``gamma * x + beta``.

    Coefficients are either shared by the whole batch (shape C) or given per
    sample (shape N x C).
    """

    name = "modulate"

    def forward(self, x, gamma, beta):
        self.x, self.gamma_shape = x, gamma.shape
        self.gamma = _channel_view(gamma)
        return self.gamma * x + _channel_view(beta)

    def backward(self, grad):
        grad_x = grad * self.gamma
        grad_gamma = _unbroadcast((grad * self.x).sum(axis=(2, 3, 4)), self.gamma_shape)
        grad_beta = _unbroadcast(grad.sum(axis=(2, 3, 4)), self.gamma_shape)
        return grad_x, grad_gamma, grad_beta


def _channel_view(coeffs: np.ndarray) -> np.ndarray:
    if coeffs.ndim == 1:
        return coeffs.reshape(1, -1, 1, 1, 1)
    return coeffs.reshape(coeffs.shape + (1, 1, 1))


def _kernel_offsets(kernel: Triple, extent: Triple, stride: Triple):
    """Yield each kernel offset with the strided slice it touches."""
    for offset in np.ndindex(*kernel):
        window = tuple(
            slice(o, o + s * (e - 1) + 1, s) for o, e, s in zip(offset, extent, stride)
        )
        yield offset, (slice(None), slice(None)) + window


class Conv3d(Function):
    """Direct cross-correlation with zero padding.

    Forward and backward both accumulate one channel-mixing tensordot per
    kernel offset, always in the same order.
    """

    name = "conv3d"

    def forward(self, x, weight, bias=None, *, stride, padding):
        pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
        self.x_shape, self.padding, self.stride = x.shape, padding, stride
        self.xp = np.pad(x, pads) if any(padding) else x
        self.weight, self.has_bias = weight, bias is not None
        self.out_shape = conv_output_shape(x.shape[2:], weight.shape[2:], stride, padding)
        out = np.zeros((x.shape[0],) + self.out_shape + (weight.shape[0],), dtype=x.dtype)
        for offset, window in _kernel_offsets(weight.shape[2:], self.out_shape, stride):
            kernel = weight[(slice(None), slice(None)) + offset]
            out += np.tensordot(self.xp[window], kernel, axes=([1], [1]))
        out = np.moveaxis(out, -1, 1)
        if bias is not None:
            out = out + bias.reshape(1, -1, 1, 1, 1)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        grad_xp = np.zeros_like(self.xp)
        grad_weight = np.zeros_like(self.weight)
        for offset, window in _kernel_offsets(self.weight.shape[2:], self.out_shape, self.stride):
            index = (slice(None), slice(None)) + offset
            grad_weight[index] = np.tensordot(grad, self.xp[window], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            grad_xp[window] += np.moveaxis(
                np.tensordot(grad, self.weight[index], axes=([1], [0])), -1, 1)
        crop = (slice(None), slice(None)) + tuple(
            slice(p, p + n) for p, n in zip(self.padding, self.x_shape[2:]))
        grads = (np.ascontiguousarray(grad_xp[crop]), grad_weight)
        if self.has_bias:
            grads += (grad.sum(axis=(0, 2, 3, 4)),)
        return grads


class ConvTranspose3d(Function):
    """Gradient-of-convolution upsampling: scatter-accumulate per kernel offset."""

    name = "transposed_conv3d"

    def forward(self, x, weight, bias=None, *, stride):
        self.x, self.weight, self.stride = x, weight, stride
        self.has_bias = bias is not None
        out_shape = transposed_output_shape(x.shape[2:], weight.shape[2:], stride)
        out = np.zeros((x.shape[0], weight.shape[1]) + out_shape, dtype=x.dtype)
        for offset, window in _kernel_offsets(weight.shape[2:], x.shape[2:], stride):
            kernel = weight[(slice(None), slice(None)) + offset]
            out[window] += np.moveaxis(np.tensordot(x, kernel, axes=([1], [0])), -1, 1)
        if bias is not None:
            out += bias.reshape(1, -1, 1, 1, 1)
        return out

    def backward(self, grad):
        grad_x = np.zeros_like(self.x)
        grad_weight = np.zeros_like(self.weight)
        for offset, window in _kernel_offsets(self.weight.shape[2:], self.x.shape[2:], self.stride):
            index = (slice(None), slice(None)) + offset
            grad_slice = grad[window]
            grad_x += np.moveaxis(np.tensordot(grad_slice, self.weight[index], axes=([1], [1])), -1, 1)
            grad_weight[index] = np.tensordot(self.x, grad_slice, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        grads = (grad_x, grad_weight)
        if self.has_bias:
            grads += (grad.sum(axis=(0, 2, 3, 4)),)
        return grads


def as_triple(value: Union[int, Sequence[int]]) -> Triple:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * 3
    triple = tuple(int(v) for v in value)
    if len(triple) != 3:
        raise TensorShapeError(f"Expected three spatial values, got {value!r}")
    return triple


def conv_output_shape(spatial: Sequence[int], kernel: Sequence[int],
                      stride: Triple, padding: Triple) -> Triple:
    """Output size per axis, requiring (n + 2p - k) to be divisible by s."""
    shape = []
    for axis, n, k, s, p in zip(SPATIAL_AXES, spatial, kernel, stride, padding):
        span = n + 2 * p - k
        if span < 0:
            raise TensorShapeError(f"Kernel size {k} exceeds padded input size {n + 2 * p} on axis {axis}", axis)
        if span % s:
            raise TensorShapeError(
                f"Output size on axis {axis} is not an integer: ({n}+2*{p}-{k})/{s}+1", axis)
        shape.append(span // s + 1)
    return tuple(shape)


def transposed_output_shape(spatial: Sequence[int], kernel: Sequence[int], stride: Triple) -> Triple:
    return tuple((n - 1) * s + k for n, k, s in zip(spatial, kernel, stride))


def _check_feature_map(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise TensorShapeError(f"{what} must be N x C x D x H x W, got shape {x.shape}")


def _check_bias(bias: Optional[Tensor], channels: int) -> None:
    if bias is not None and bias.shape != (channels,):
        raise TensorShapeError(f"Bias must have shape ({channels},), got {bias.shape}", "C")


def conv3d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding=0) -> Tensor:
    """3D cross-correlation of ``input`` (N,Cin,D,H,W) with ``weight`` (Cout,Cin,kD,kH,kW)."""
    _check_feature_map(input, "conv3d input")
    if weight.ndim != 5:
        raise TensorShapeError(f"conv3d weight must be Cout x Cin x kD x kH x kW, got {weight.shape}")
    if input.shape[1] != weight.shape[1]:
        raise TensorShapeError(
            f"conv3d input has {input.shape[1]} channels but weight expects {weight.shape[1]}", "C")
    stride, padding = as_triple(stride), as_triple(padding)
    if min(stride) < 1 or min(padding) < 0:
        raise TensorShapeError(f"Invalid stride {stride} or padding {padding}")
    conv_output_shape(input.shape[2:], weight.shape[2:], stride, padding)
    _check_bias(bias, weight.shape[0])
    inputs = (input, weight) if bias is None else (input, weight, bias)
    return Conv3d.apply(*inputs, stride=stride, padding=padding)


def transposed_conv3d(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                      stride=1) -> Tensor:
    """Transposed convolution with ``weight`` laid out as (Cin,Cout,kD,kH,kW)."""
    _check_feature_map(input, "transposed_conv3d input")
    if weight.ndim != 5:
        raise TensorShapeError(f"transposed_conv3d weight must be 5-D, got {weight.shape}")
    if input.shape[1] != weight.shape[0]:
        raise TensorShapeError(
            f"transposed_conv3d input has {input.shape[1]} channels but weight expects {weight.shape[0]}", "C")
    stride = as_triple(stride)
    if min(stride) < 1:
        raise TensorShapeError(f"Stride components must be >= 1, got {stride}")
    _check_bias(bias, weight.shape[1])
    inputs = (input, weight) if bias is None else (input, weight, bias)
    return ConvTranspose3d.apply(*inputs, stride=stride)


def instance_norm(input: Tensor, gain: Tensor, shift: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) over D, H, W, then apply ``gain`` and ``shift``.

    Args:
        input: Feature map N x C x D x H x W with at least 2 voxels
        gain: Per-channel scale, shape C
        shift: Per-channel offset, shape C
        epsilon: Added to the variance; a constant channel maps to ``shift``

    Returns:
        Tensor: Normalized feature map of the input shape

    Raises:
        TensorShapeError: If the shapes disagree or there is a single voxel
    """
    _check_feature_map(input, "instance_norm input")
    channels = input.shape[1]
    if gain.shape != (channels,) or shift.shape != (channels,):
        raise TensorShapeError(f"instance_norm affine parameters must have shape ({channels},)", "C")
    if int(np.prod(input.shape[2:])) < 2:
        raise TensorShapeError("instance_norm needs at least 2 spatial voxels")
    return InstanceNorm3d.apply(input, gain, shift, epsilon=epsilon)


def leaky_relu(input: Tensor, slope: float = 0.01) -> Tensor:
    return LeakyReLU.apply(input, slope=slope)


def softmax_channel(input: Tensor) -> Tensor:
    """Softmax over axis 1."""
    if input.ndim < 2 or input.shape[1] < 2:
        raise TensorShapeError(f"softmax_channel needs at least 2 channels, got shape {input.shape}", "C")
    return SoftmaxChannel.apply(input)


def log_softmax_channel(input: Tensor) -> Tensor:
    if input.ndim < 2 or input.shape[1] < 2:
        raise TensorShapeError(f"log_softmax_channel needs at least 2 channels, got shape {input.shape}", "C")
    return LogSoftmaxChannel.apply(input)


def linear(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Dense layer ``input @ weight.T + bias`` on a vector or a batch of vectors."""
    if input.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise TensorShapeError(
            f"linear: input {input.shape}, weight {weight.shape} and bias {bias.shape} do not match")
    return Linear.apply(input, weight, bias)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, reference)) if i != axis):
            raise TensorShapeError(f"concat: shapes {reference} and {t.shape} differ off axis {axis}")
    return Concat.apply(*tensors, axis=axis)


def modulate_channels(input: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return Modulate.apply(input, gamma, beta)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad.

    Contributions from multiple uses of the same tensor are summed.
    """
    if loss.size != 1:
        raise TensorShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("Loss was not computed from any tensor requiring grad on this tape")

    pending: Dict[int, Tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }
    for node in reversed(tape.nodes):
        entry = pending.pop(id(node.output), None)
        if entry is None:
            continue
        output, upstream = entry
        output.accumulate_grad(upstream)
        for tensor, grad in zip(node.inputs, node.function.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = (tensor, pending[key][1] + grad)
            else:
                pending[key] = (tensor, grad)
    for tensor, grad in pending.values():
        tensor.accumulate_grad(grad)


def finite_difference_grad(f: Callable[[Sequence[Tensor]], float], params: Sequence[Tensor],
                           h: float = 1e-3,
                           entries: Optional[Sequence[Tuple[int, int]]] = None) -> List[np.ndarray]:
    """Central-difference gradient estimate of ``f`` at ``params``.

    ``entries`` restricts the estimate to (parameter index, flat index)
    pairs; other positions are NaN. The divisor is the step actually taken
    after rounding to the storage type.
    """
    if h <= 0:
        raise ValueError(f"Step h must be positive, got {h}")
    if entries is None:
        entries = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
        estimates = [np.zeros(p.shape, dtype=np.float64) for p in params]
    else:
        estimates = [np.full(p.shape, np.nan, dtype=np.float64) for p in params]
    for param_index, flat_index in entries:
        flat = params[param_index].data.reshape(-1)
        original = flat[flat_index]
        flat[flat_index] = original + flat.dtype.type(h)
        upper, f_upper = flat[flat_index], f(params)
        flat[flat_index] = original - flat.dtype.type(h)
        lower, f_lower = flat[flat_index], f(params)
        flat[flat_index] = original
        estimates[param_index].reshape(-1)[flat_index] = (
            (float(f_upper) - float(f_lower)) / (float(upper) - float(lower)))
    return estimates


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale
