"""
Differentiable operator set.

Every op takes/returns :class:`~sfim.tensor.Tensor` and registers its backward
closure through :func:`~sfim.tensor.apply_op`. Spatial ops accept ``C×H×W`` or
``N×C×H×W``; the channel axis is always ``ndim - 3``.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sfim.errors import ShapeError
from sfim.tensor import ComplexTensor, Tensor, apply_op, as_tensor

Operand = Union[Tensor, float, int]
Padding = Union[int, Tuple[int, int, int, int]]

GELU_COEFF = math.sqrt(2.0 / math.pi)
LAYER_NORM_EPS = 1e-6


# ---------------------------------------------------------------- broadcasting

def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim != b.ndim or any(x != y and x != 1 and y != 1 for x, y in zip(a.shape, b.shape)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return apply_op("add", a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return apply_op("sub", a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return apply_op("mul", a.data * b.data, (a, b),
                    lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return apply_op("div", out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return apply_op("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, factor: float) -> Tensor:
    return apply_op("scale", x.data * factor, (x,), lambda g: (g * factor,))


def add_scalar(x: Tensor, value: float) -> Tensor:
    return apply_op("add_scalar", x.data + value, (x,), lambda g: (g,))


def square(x: Tensor) -> Tensor:
    return apply_op("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return apply_op("sqrt", out, (x,), lambda g: (g / (2.0 * out),))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return apply_op("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return apply_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    return apply_op("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0.0),))


def _gelu(v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    inner = GELU_COEFF * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    value = 0.5 * v * (1.0 + t)
    deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_COEFF * (1.0 + 3.0 * 0.044715 * v * v)
    return value, deriv


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    value, deriv = _gelu(x.data)
    return apply_op("gelu", value, (x,), lambda g: (g * deriv,))


def geglu(x: Tensor) -> Tensor:
    """Split channels into halves ``[a; b]`` and return ``a * gelu(b)``."""
    axis = x.ndim - 3
    channels = x.shape[axis]
    if channels % 2:
        raise ShapeError(f"geglu needs an even channel count, got {channels}")
    a, b = np.split(x.data, 2, axis=axis)
    gb, dgb = _gelu(b)

    def backward(g):
        return (np.concatenate([g * gb, g * a * dgb], axis=axis),)

    return apply_op("geglu", a * gb, (x,), backward)


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def amax(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    peak = x.data.max(axis=axes, keepdims=True)
    mask = (x.data == peak).astype(np.float64)
    mask /= mask.sum(axis=axes, keepdims=True)
    out = peak if keepdims else peak.squeeze(axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * mask,)

    return apply_op("amax", out, (x,), backward)


# ---------------------------------------------------------------- layout

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return apply_op("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                    lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return apply_op("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=tensors[0].ndim - 3)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return apply_op("narrow", x.data[index].copy(), (x,), backward)


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    axis = x.ndim - 3
    width, rest = divmod(x.shape[axis], parts)
    if rest:
        raise ShapeError(f"cannot split {x.shape[axis]} channels into {parts} equal parts")
    return [narrow(x, axis, i * width, (i + 1) * width) for i in range(parts)]


def _pad_spec(padding: Padding) -> Tuple[int, int, int, int]:
    if isinstance(padding, int):
        return padding, padding, padding, padding
    return tuple(padding)  # type: ignore[return-value]


def _scatter_axis(g: np.ndarray, index: np.ndarray, size: int, axis: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] = size
    out = np.zeros(shape)
    np.add.at(np.moveaxis(out, axis, 0), index, np.moveaxis(g, axis, 0))
    return out


def pad2d(x: Tensor, padding: Padding, mode: str = "reflect") -> Tensor:
    """Pad the two trailing axes; ``padding`` is p or (top, bottom, left, right)."""
    top, bottom, left, right = _pad_spec(padding)
    if top == bottom == left == right == 0:
        return x
    h, w = x.shape[-2:]
    if mode == "zero":
        widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
        out = np.pad(x.data, widths)
        return apply_op("pad2d", out, (x,), lambda g: (g[..., top:top + h, left:left + w],))
    if mode != "reflect":
        raise ShapeError(f"unknown padding mode {mode!r}")
    rows = np.pad(np.arange(h), (top, bottom), mode="reflect")
    cols = np.pad(np.arange(w), (left, right), mode="reflect")
    out = np.take(np.take(x.data, rows, axis=-2), cols, axis=-1)

    def backward(g):
        g = _scatter_axis(g, cols, w, g.ndim - 1)
        return (_scatter_axis(g, rows, h, g.ndim - 2),)

    return apply_op("pad2d", out, (x,), backward)


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    if top == 0 and left == 0 and (height, width) == x.shape[-2:]:
        return x
    index = (Ellipsis, slice(top, top + height), slice(left, left + width))

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return apply_op("crop2d", x.data[index].copy(), (x,), backward)


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    raise ShapeError(f"expected C×H×W or N×C×H×W, got shape {x.shape}")


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------- convolution

def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"kernel {kh}×{kw} does not fit padded input {x.shape[2]}×{x.shape[3]}")
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: Padding = 0, padding_mode: str = "reflect") -> Tensor:
    """Cross-correlation; weight is C_out×C_in×k×k."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    x4, squeeze = _batched(x)
    x4 = pad2d(x4, padding, padding_mode)
    c_out, c_in, kh, kw = weight.shape
    if x4.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has {x4.shape[1]} channels, weight expects {c_in}")
    xd, wd = x4.data, weight.data
    windows = _conv_windows(xd, kh, kw, stride)
    _, _, ho, wo = windows.shape[:4]
    out = np.tensordot(windows, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                tap = np.tensordot(g, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += tap
        grads = (gx, gw)
        return grads + ((g.sum(axis=(0, 2, 3)),) if bias is not None else ())

    inputs = (x4, weight) + ((bias,) if bias is not None else ())
    out = apply_op("conv2d", np.ascontiguousarray(out), inputs, backward)
    return _unbatched(out, squeeze)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     padding: Padding = 0, padding_mode: str = "reflect") -> Tensor:
    """Grouped conv with groups = C; weight is C×m×k×k, output channel c·m + j."""
    x4, squeeze = _batched(x)
    x4 = pad2d(x4, padding, padding_mode)
    channels, multiplier, kh, kw = weight.shape
    if x4.shape[1] != channels:
        raise ShapeError(f"depthwise_conv2d: input has {x4.shape[1]} channels, weight expects {channels}")
    xd, wd = x4.data, weight.data
    windows = _conv_windows(xd, kh, kw, 1)
    n, _, ho, wo = windows.shape[:4]
    out = np.einsum("nchwij,cmij->ncmhw", windows, wd, optimize=True).reshape(n, channels * multiplier, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        g5 = g.reshape(n, channels, multiplier, ho, wo)
        gw = np.einsum("ncmhw,nchwij->cmij", g5, windows, optimize=True)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho, j:j + wo] += np.einsum("ncmhw,cm->nchw", g5, wd[:, :, i, j])
        grads = (gx, gw)
        return grads + ((g.sum(axis=(0, 2, 3)),) if bias is not None else ())

    inputs = (x4, weight) + ((bias,) if bias is not None else ())
    out = apply_op("depthwise_conv2d", np.ascontiguousarray(out), inputs, backward)
    return _unbatched(out, squeeze)


# ---------------------------------------------------------------- normalization

def layer_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the channel axis at every spatial site."""
    axis = x.ndim - 3
    channels = x.shape[axis]
    centered = x.data - x.data.mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=axis, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        return (inv_std * (g - g.mean(axis=axis, keepdims=True) - xhat * (g * xhat).mean(axis=axis, keepdims=True)),)

    out = apply_op("layer_norm", xhat, (x,), backward)
    if weight is None:
        return out
    affine_shape = [1] * x.ndim
    affine_shape[axis] = channels
    out = mul(out, reshape(weight, affine_shape))
    return add(out, reshape(bias, affine_shape)) if bias is not None else out


# ---------------------------------------------------------------- resampling

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row r holds the weights output sample r takes from the input (align_corners=False)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    matrix = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix


def interpolate(x: Tensor, size: Tuple[int, int]) -> Tensor:
    """Bilinear resize of the two trailing axes."""
    height, width = size
    if height < 1 or width < 1:
        raise ShapeError(f"interpolate target must be positive, got {size}")
    if (height, width) == x.shape[-2:]:
        return x
    mh = bilinear_matrix(x.shape[-2], height)
    mw = bilinear_matrix(x.shape[-1], width)
    out = mh @ x.data @ mw.T
    return apply_op("interpolate", out, (x,), lambda g: (mh.T @ g @ mw,))


# ---------------------------------------------------------------- pooling

def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(-2, -1), keepdims=True)


def global_max_pool(x: Tensor) -> Tensor:
    return amax(x, axis=(-2, -1), keepdims=True)


def spatial_mean(x: Tensor) -> Tensor:
    return mean(x, axis=x.ndim - 3, keepdims=True)


def spatial_max(x: Tensor) -> Tensor:
    return amax(x, axis=x.ndim - 3, keepdims=True)


# ---------------------------------------------------------------- fourier

def fft2(x: Tensor) -> ComplexTensor:
    """Unnormalized 2-D FFT over the two trailing axes."""
    spectrum = np.fft.fft2(x.data)
    bins = x.shape[-2] * x.shape[-1]

    def real_backward(g):
        return (np.fft.ifft2(g).real * bins,)

    def imag_backward(g):
        return (-np.fft.ifft2(g).imag * bins,)

    real = apply_op("fft2.real", spectrum.real.copy(), (x,), real_backward)
    imag = apply_op("fft2.imag", spectrum.imag.copy(), (x,), imag_backward)
    return ComplexTensor(real, imag)


def ifft2(spectrum: ComplexTensor) -> Tensor:
    """Inverse FFT with the 1/(H·W) factor; returns the real part."""
    re, im = spectrum.real, spectrum.imag
    bins = re.shape[-2] * re.shape[-1]
    out = np.fft.ifft2(re.data + 1j * im.data).real

    def backward(g):
        grad = np.fft.fft2(g) / bins
        return (grad.real, grad.imag)

    return apply_op("ifft2", out, (re, im), backward)


def complex_abs(real: Tensor, imag: Tensor) -> Tensor:
    radius = np.hypot(real.data, imag.data)
    safe = np.where(radius > 0.0, radius, 1.0)

    def backward(g):
        scale_ = np.where(radius > 0.0, g / safe, 0.0)
        return (scale_ * real.data, scale_ * imag.data)

    return apply_op("complex_abs", radius, (real, imag), backward)


def complex_angle(real: Tensor, imag: Tensor) -> Tensor:
    power = real.data ** 2 + imag.data ** 2
    safe = np.where(power > 0.0, power, 1.0)

    def backward(g):
        scale_ = np.where(power > 0.0, g / safe, 0.0)
        return (-scale_ * imag.data, scale_ * real.data)

    return apply_op("complex_angle", np.arctan2(imag.data, real.data), (real, imag), backward)


def wrap_phase(x: Tensor) -> Tensor:
    """Map angles into (-pi, pi]."""
    turns = np.ceil((x.data - math.pi) / (2.0 * math.pi))
    return apply_op("wrap_phase", x.data - 2.0 * math.pi * turns, (x,), lambda g: (g,))
