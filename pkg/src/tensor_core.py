"""
Dense Tensor Core with Reverse-Mode Gradients

Handles:
- A small double-precision Tensor wrapper around numpy arrays
- A gradient tape that records every differentiable op while active
- The ops the occupancy pipeline needs (softmax, layer norm, convolutions,
  pooling, bilinear sampling, activations, dropout, contractions)
- Central finite-difference gradient checking
"""

import math
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf, expit

DEFAULT_DTYPE = np.float64
LAYER_NORM_EPS = 1e-6

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TensorError(ValueError):
    """Base error for tensor operations."""


class ShapeError(TensorError):
    """Raised when operand shapes are inconsistent."""


class NonFiniteError(TensorError):
    """Raised when an op turns finite inputs into non-finite outputs."""


class GradientError(TensorError):
    """Raised when a backward pass is requested incorrectly."""


class Tensor:
    """
    N-dimensional array with an optional gradient requirement.

    Tensors compare by identity, so they can be used as dictionary keys
    for gradient lookups.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=DEFAULT_DTYPE):
        # ascontiguousarray would promote 0-d input to shape (1,)
        data = np.asarray(data, dtype=dtype)
        self.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return index(self, key)


TensorLike = Union[Tensor, np.ndarray, float, int]


@dataclass
class TapeRecord:
    """One recorded op application."""
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradTape:
    """
    Ordered record of op applications for one forward pass.

    Usage:
        with GradTape() as tape:
            loss = ...
        grads = backward(tape, loss, params)
    """

    def __init__(self):
        self.records: list = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.records)

    def first_non_finite(self) -> Optional[TapeRecord]:
        """Return the earliest record whose output holds NaN or inf."""
        for record in self.records:
            if not np.all(np.isfinite(record.output.data)):
                return record
        return None


_TAPE_STACK: list = []


def active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DEFAULT_DTYPE))


def apply_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """
    Wrap a computed value as a Tensor and record it on the active tape.

    Args:
        op: Op name, used in diagnostics
        inputs: Input tensors, in the order the VJP returns gradients
        out_data: The forward result
        vjp: Maps the upstream gradient to one gradient (or None) per input

    Returns:
        The output Tensor
    """
    if all(np.all(np.isfinite(t.data)) for t in inputs) and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values from finite inputs")

    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and needs_grad:
        tape.records.append(TapeRecord(op, tuple(inputs), out, vjp))
    return out


def backward(tape: GradTape, loss: Tensor,
             params: Optional[Iterable[Tensor]] = None) -> dict:
    """
    Run the reverse sweep over a tape.

    Args:
        tape: Tape recorded during the forward pass
        loss: Scalar tensor produced on that tape
        params: Tensors whose gradients are requested; every one must
            require gradients

    Returns:
        dict mapping Tensor -> gradient array. With params given, every
        requested tensor is present (zeros if it did not influence loss).
    """
    if loss.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    if not any(record.output is loss for record in tape.records):
        raise GradientError("loss was not produced on this tape")

    grads = {loss: np.ones_like(loss.data)}
    for record in reversed(tape.records):
        upstream = grads.get(record.output)
        if upstream is None:
            continue
        input_grads = record.vjp(upstream)
        for tensor, grad in zip(record.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.shape:
                raise ShapeError(
                    f"{record.op} returned gradient of shape {grad.shape} "
                    f"for input of shape {tensor.shape}")
            if tensor in grads:
                grads[tensor] = grads[tensor] + grad
            else:
                grads[tensor] = grad

    if params is None:
        return grads

    result = {}
    for param in params:
        if not param.requires_grad:
            raise GradientError(f"gradient requested for detached tensor {param!r}")
        result[param] = grads.get(param, np.zeros_like(param.data))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return apply_op("add", (a, b), a.data + b.data,
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return apply_op("sub", (a, b), a.data - b.data,
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return apply_op("mul", (a, b), a.data * b.data,
                    lambda g: (_unbroadcast(g * b.data, a.shape),
                               _unbroadcast(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return apply_op("div", (a, b), out,
                    lambda g: (_unbroadcast(g / b.data, a.shape),
                               _unbroadcast(-g * out / b.data, b.shape)))


def neg(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return apply_op("neg", (x,), -x.data, lambda g: (-g,))


def exp(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return apply_op("exp", (x,), out, lambda g: (g * out,))


def log(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return apply_op("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def sqrt(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return apply_op("sqrt", (x,), out, lambda g: (0.5 * g / out,))


def tanh(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return apply_op("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return apply_op("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return apply_op("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def gelu(x: TensorLike) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the Gaussian CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return apply_op("gelu", (x,), x.data * cdf, lambda g: (g * (cdf + x.data * pdf),))


def clip(x: TensorLike, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient passes only where the value was not clamped."""
    x = as_tensor(x)
    lo_arr = -np.inf if lo is None else np.asarray(lo, dtype=x.data.dtype)
    hi_arr = np.inf if hi is None else np.asarray(hi, dtype=x.data.dtype)
    out = np.minimum(np.maximum(x.data, lo_arr), hi_arr)
    passed = (x.data >= lo_arr) & (x.data <= hi_arr)
    return apply_op("clip", (x,), out, lambda g: (g * passed,))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op("sum", (x,), np.asarray(out), vjp)


def mean(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return div(sum(x, axis=axis, keepdims=keepdims), float(count))


def reshape(x: TensorLike, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    return apply_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: TensorLike, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", (x,), np.transpose(x.data, axes),
                    lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return apply_op("concat", tuple(tensors), out,
                    lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def index(x: TensorLike, key) -> Tensor:
    """Basic or fancy indexing; the VJP scatter-adds in index order."""
    x = as_tensor(x)
    out = np.array(x.data[key], dtype=x.data.dtype)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return apply_op("index", (x,), out, vjp)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op("matmul", (a, b), out, vjp)


def linear(x: TensorLike, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight (+ bias); weight is (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# Normalization and attention-style ops
# ---------------------------------------------------------------------------

def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return apply_op("softmax", (x,), out,
                    lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x: TensorLike, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} "
                         f"must match last axis {width}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply_op("layer_norm", (x, gain, bias), out, vjp)


def dropout_mask(shape: tuple, p: float, seed: int, key: str, step: int) -> np.ndarray:
    """Inverted-dropout scaling mask; a pure function of (seed, key, step)."""
    stream = np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(key.encode()), step])
    keep = stream.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x: TensorLike, p: float, seed: int, key: str, step: int, training: bool) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise TensorError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = dropout_mask(x.shape, p, seed, key, step)
    return apply_op("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Spatial ops on (C, H, W) feature maps
# ---------------------------------------------------------------------------

CONV_MODES = ("depthwise", "pointwise", "strided", "transposed")


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: TensorLike, kernel: Tensor, mode: str, stride: int = 1,
           padding: int = 0) -> Tensor:
    """
    2D convolution over a (C, H, W) map.

    Kernel layouts:
        depthwise  -> (C, k, k)
        pointwise  -> (C_out, C_in)
        strided    -> (C_out, C_in, k, k)
        transposed -> (C_in, C_out, k, k), output (H-1)*stride + k - 2*padding
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if mode not in CONV_MODES:
        raise ShapeError(f"unknown conv mode {mode!r}, expected one of {CONV_MODES}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects a (C, H, W) map, got shape {x.shape}")
    channels, height, width = x.shape

    if mode == "pointwise":
        if kernel.ndim != 2 or kernel.shape[1] != channels:
            raise ShapeError(f"pointwise kernel {kernel.shape} does not match {channels} channels")
        out = np.einsum("oc,chw->ohw", kernel.data, x.data)
        return apply_op("conv2d_pointwise", (x, kernel), out,
                        lambda g: (np.einsum("oc,ohw->chw", kernel.data, g),
                                   np.einsum("ohw,chw->oc", g, x.data)))

    if mode == "depthwise":
        if kernel.ndim != 3 or kernel.shape[0] != channels or kernel.shape[1] != kernel.shape[2]:
            raise ShapeError(f"depthwise kernel {kernel.shape} does not match {channels} channels")
        return _depthwise(x, kernel, stride, padding)

    if mode == "strided":
        if kernel.ndim != 4 or kernel.shape[1] != channels or kernel.shape[2] != kernel.shape[3]:
            raise ShapeError(f"strided kernel {kernel.shape} does not match {channels} channels")
        return _strided(x, kernel, stride, padding)

    if kernel.ndim != 4 or kernel.shape[0] != channels or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"transposed kernel {kernel.shape} does not match {channels} channels")
    return _transposed(x, kernel, stride, padding)


def _window(padded: np.ndarray, i: int, j: int, out_h: int, out_w: int, stride: int) -> np.ndarray:
    return padded[:, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride]


def _depthwise(x: Tensor, kernel: Tensor, stride: int, padding: int) -> Tensor:
    k = kernel.shape[1]
    _, height, width = x.shape
    out_h, out_w = _conv_out(height, k, stride, padding), _conv_out(width, k, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"depthwise kernel {k} too large for map {x.shape}")
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((x.shape[0], out_h, out_w))
    for i in range(k):
        for j in range(k):
            out += kernel.data[:, i, j, None, None] * _window(padded, i, j, out_h, out_w, stride)

    def vjp(g):
        gpad = np.zeros_like(padded)
        gk = np.zeros_like(kernel.data)
        for i in range(k):
            for j in range(k):
                window = _window(padded, i, j, out_h, out_w, stride)
                gk[:, i, j] = (g * window).sum(axis=(1, 2))
                gpad[:, i:i + stride * (out_h - 1) + 1:stride,
                     j:j + stride * (out_w - 1) + 1:stride] += kernel.data[:, i, j, None, None] * g
        return gpad[:, padding:padding + height, padding:padding + width], gk

    return apply_op("conv2d_depthwise", (x, kernel), out, vjp)


def _strided(x: Tensor, kernel: Tensor, stride: int, padding: int) -> Tensor:
    c_out, _, k, _ = kernel.shape
    _, height, width = x.shape
    out_h, out_w = _conv_out(height, k, stride, padding), _conv_out(width, k, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"kernel {k} too large for map {x.shape}")
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((c_out, out_h, out_w))
    for i in range(k):
        for j in range(k):
            out += np.einsum("oc,chw->ohw", kernel.data[:, :, i, j],
                             _window(padded, i, j, out_h, out_w, stride))

    def vjp(g):
        gpad = np.zeros_like(padded)
        gk = np.zeros_like(kernel.data)
        for i in range(k):
            for j in range(k):
                window = _window(padded, i, j, out_h, out_w, stride)
                gk[:, :, i, j] = np.einsum("ohw,chw->oc", g, window)
                gpad[:, i:i + stride * (out_h - 1) + 1:stride,
                     j:j + stride * (out_w - 1) + 1:stride] += np.einsum(
                         "oc,ohw->chw", kernel.data[:, :, i, j], g)
        return gpad[:, padding:padding + height, padding:padding + width], gk

    return apply_op("conv2d_strided", (x, kernel), out, vjp)


def _transposed(x: Tensor, kernel: Tensor, stride: int, padding: int) -> Tensor:
    _, c_out, k, _ = kernel.shape
    _, height, width = x.shape
    full_h, full_w = (height - 1) * stride + k, (width - 1) * stride + k
    out_h, out_w = full_h - 2 * padding, full_w - 2 * padding
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"transposed conv padding {padding} too large for map {x.shape}")
    full = np.zeros((c_out, full_h, full_w))
    for i in range(k):
        for j in range(k):
            full[:, i:i + stride * (height - 1) + 1:stride,
                 j:j + stride * (width - 1) + 1:stride] += np.einsum(
                     "co,chw->ohw", kernel.data[:, :, i, j], x.data)
    out = full[:, padding:padding + out_h, padding:padding + out_w]

    def vjp(g):
        gfull = np.zeros_like(full)
        gfull[:, padding:padding + out_h, padding:padding + out_w] = g
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        for i in range(k):
            for j in range(k):
                window = gfull[:, i:i + stride * (height - 1) + 1:stride,
                               j:j + stride * (width - 1) + 1:stride]
                gx += np.einsum("co,ohw->chw", kernel.data[:, :, i, j], window)
                gk[:, :, i, j] = np.einsum("chw,ohw->co", x.data, window)
        return gx, gk

    return apply_op("conv2d_transposed", (x, kernel), np.ascontiguousarray(out), vjp)


def global_avg_pool(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] * x.shape[2] == 0:
        raise ShapeError(f"global_avg_pool needs a non-empty (C, H, W) map, got {x.shape}")
    return mean(x, axis=(1, 2))


def bilinear_sample(x: TensorLike, uv: TensorLike) -> Tensor:
    """
    Sample a (C, H, W) map at normalized coordinates.

    Args:
        x: Feature map
        uv: (P, 2) coordinates in [0, 1]^2, u along width, v along height;
            cell (r, c) has its centre at ((c + 0.5) / W, (r + 0.5) / H)

    Returns:
        (P, C) samples. Coordinates beyond the outer cell centres are
        clamped to the border, where the uv gradient is zero.
    """
    x, uv = as_tensor(x), as_tensor(uv)
    if uv.ndim != 2 or uv.shape[1] != 2:
        raise ShapeError(f"uv must be (P, 2), got {uv.shape}")
    if not np.all(np.isfinite(uv.data)):
        raise NonFiniteError("bilinear_sample received non-finite coordinates")
    _, height, width = x.shape

    def axis_terms(coord: np.ndarray, extent: int):
        raw = coord * extent - 0.5
        pos = np.clip(raw, 0.0, extent - 1)
        inside = (raw > 0.0) & (raw < extent - 1)
        lo = np.minimum(np.floor(pos).astype(np.int64), max(extent - 2, 0))
        hi = np.minimum(lo + 1, extent - 1)
        frac = pos - lo
        return lo, hi, frac, inside

    x0, x1, fx, in_x = axis_terms(uv.data[:, 0], width)
    y0, y1, fy, in_y = axis_terms(uv.data[:, 1], height)
    v00, v01 = x.data[:, y0, x0].T, x.data[:, y0, x1].T
    v10, v11 = x.data[:, y1, x0].T, x.data[:, y1, x1].T
    w00 = ((1 - fx) * (1 - fy))[:, None]
    w01 = (fx * (1 - fy))[:, None]
    w10 = ((1 - fx) * fy)[:, None]
    w11 = (fx * fy)[:, None]
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def vjp(g):
        gx = np.zeros_like(x.data)
        for rows, cols, weight in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(gx, (slice(None), rows, cols), (g * weight).T)
        d_fx = (1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
        d_fy = (1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
        guv = np.stack([(g * d_fx).sum(axis=1) * width * in_x,
                        (g * d_fy).sum(axis=1) * height * in_y], axis=1)
        return gx, guv

    return apply_op("bilinear_sample", (x, uv), out, vjp)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-valued closure with respect to target."""
    grad = np.zeros_like(target.data)
    flat, gflat = target.data.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn().item()
        flat[i] = original - step
        minus = fn().item()
        flat[i] = original
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """
    Compare tape gradients of a scalar closure with central differences.

    Args:
        fn: Closure computing a scalar loss from the inputs
        inputs: Tensors (requires_grad=True) to differentiate with respect to
        step: Finite-difference step

    Returns:
        The worst relative error over all inputs
    """
    with GradTape() as tape:
        loss = fn()
    grads = backward(tape, loss, inputs)
    worst = 0.0
    for tensor in inputs:
        numeric = numeric_gradient(fn, tensor, step)
        worst = max(worst, relative_error(grads[tensor], numeric))
    return worst
