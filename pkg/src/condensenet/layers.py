"""Convolution, spatial pooling and cross-channel pooling kernels, forward and backward.

Array kernels work on channel-first arrays whose last three axes are
(channels, height, width); a leading batch axis is allowed where noted.  The
float64 kernels (``conv2d``, ``conv2d_backward``) serve training and gradient
checks.  The executor kernels (``conv_accumulate``, ``conv_finish``,
``xpool``, ``spool``) fix a per-element operation order so that whole-plane and
block-by-block evaluation give bit-identical results.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor

MAX_KERNEL = 7
XPOOL_OPS = ("max", "avg", "min")


class ShapeError(ValueError):
    pass


class UnsupportedModeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvParams:
    out_channels: int
    in_channels: int
    kernel: int = 3

    def __post_init__(self):
        if self.kernel > MAX_KERNEL:
            raise ShapeError(f"kernel {self.kernel} exceeds the {MAX_KERNEL}x{MAX_KERNEL} maximum")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel must be odd and positive, got {self.kernel}")
        if self.out_channels < 1 or self.in_channels < 1:
            raise ShapeError("channel counts must be positive")

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2


@dataclass(frozen=True)
class XPoolParams:
    alpha: int = 1
    op: str = "max"

    def __post_init__(self):
        if self.alpha < 1:
            raise ShapeError(f"alpha must be >= 1, got {self.alpha}")
        if self.op not in XPOOL_OPS:
            raise ShapeError(f"unknown cross-channel pooling op {self.op!r}")


@dataclass(frozen=True)
class SPoolParams:
    stride: int = 2
    window: int = 2

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ShapeError(f"spatial pooling stride must be 1 or 2, got {self.stride}")
        if self.window != 2:
            raise ShapeError("only 2x2 spatial pooling is supported")

    def out_size(self, n: int) -> int:
        return -(-n // self.stride)


# float64 kernels for training and gradient checks


def _pad_hw(x: np.ndarray, pad: int, value=0) -> np.ndarray:
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths, constant_values=value)


def conv2d(x: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Same-size stride-1 convolution (cross-correlation) with zero padding.

    ``x`` is (..., N, H, W), ``w`` is (C, N, K, K); returns (..., C, H, W).
    """
    k = w.shape[-1]
    if x.shape[-3] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[-3]} channels, weights expect {w.shape[1]}")
    patches = sliding_window_view(_pad_hw(x, (k - 1) // 2), (k, k), axis=(-2, -1))
    out = np.einsum("...nhwuv,cnuv->...chw", patches, w, optimize=True)
    if bias is not None:
        out = out + np.asarray(bias).reshape(-1, 1, 1)
    return out


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Adjoints of :func:`conv2d`.  Returns (grad_x, grad_w, grad_bias)."""
    k = w.shape[-1]
    pad = (k - 1) // 2
    # input gradient is a correlation of the output gradient with the flipped, transposed bank
    w_t = np.flip(w, axis=(-2, -1)).transpose(1, 0, 2, 3)
    grad_x = conv2d(grad_out, w_t)
    patches = sliding_window_view(_pad_hw(x, pad), (k, k), axis=(-2, -1))
    # fold any batch dimensions into one so the weight gradient sums over them
    g = grad_out.reshape((-1,) + grad_out.shape[-3:])
    grad_w = np.einsum("bchw,bnhwuv->cnuv", g, patches.reshape((-1,) + patches.shape[-5:]), optimize=True)
    grad_b = grad_out.sum(axis=tuple(range(grad_out.ndim - 3)) + (-2, -1))
    return grad_x, grad_w, grad_b


def leaky_relu(x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(grad_out: np.ndarray, x: np.ndarray, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, grad_out, slope * grad_out)


# cross-channel pooling


def _group(x: np.ndarray, alpha: int) -> np.ndarray:
    c = x.shape[-3]
    if c % alpha:
        raise ShapeError(f"{c} channels are not divisible by alpha={alpha}")
    return x.reshape(x.shape[:-3] + (c // alpha, alpha) + x.shape[-2:])


def xpool(x: np.ndarray, alpha: int, op: str = "max"):
    """Pool over non-overlapping windows of ``alpha`` consecutive channels.

    Returns (pooled, trace).  For max/min, ``trace`` holds the absolute input
    channel chosen at every output pixel, ties going to the lowest index; for
    avg it is None.  Integer (code) inputs average with round-half-up so the
    result stays a code; float inputs average in their own dtype.
    """
    if op not in XPOOL_OPS:
        raise ShapeError(f"unknown cross-channel pooling op {op!r}")
    g = _group(np.asarray(x), alpha)
    if op == "avg":
        # sequential sum keeps the per-element order independent of array extent
        acc = g[..., 0, :, :].astype(np.int64 if g.dtype.kind in "ui" else g.dtype)
        for a in range(1, alpha):
            acc = acc + g[..., a, :, :]
        if g.dtype.kind in "ui":
            return ((2 * acc + alpha) // (2 * alpha)).astype(g.dtype), None
        return (acc / g.dtype.type(alpha)).astype(g.dtype), None
    local = np.argmax(g, axis=-3) if op == "max" else np.argmin(g, axis=-3)
    pooled = np.take_along_axis(g, local[..., None, :, :], axis=-3)[..., 0, :, :]
    base = (np.arange(g.shape[-4]) * alpha).reshape(-1, 1, 1)
    return pooled, local + base


def xpool_backward(grad_out: np.ndarray, trace: Optional[np.ndarray], alpha: int, op: str = "max") -> np.ndarray:
    """Route the pooled gradient back to the expanded channels."""
    grad_out = np.asarray(grad_out)
    out_shape = grad_out.shape[:-3] + (grad_out.shape[-3] * alpha,) + grad_out.shape[-2:]
    if op == "avg":
        return np.repeat(grad_out / alpha, alpha, axis=-3)
    if trace is None:
        raise ShapeError(f"{op} pooling backward needs the forward trace")
    if trace.shape != grad_out.shape:
        raise ShapeError(f"trace shape {trace.shape} does not match gradient {grad_out.shape}")
    grouped = np.zeros(grad_out.shape[:-3] + (grad_out.shape[-3], alpha) + grad_out.shape[-2:], dtype=grad_out.dtype)
    base = (np.arange(grad_out.shape[-3]) * alpha).reshape(-1, 1, 1)
    local = trace - base
    if local.size and (local.min() < 0 or local.max() >= alpha):
        raise ShapeError("trace index outside its alpha-window")
    np.put_along_axis(grouped, local[..., None, :, :], grad_out[..., None, :, :], axis=-3)
    return grouped.reshape(out_shape)


# spatial pooling


def pool_fill(dtype) -> float:
    """Minimum representable value, used to pad stride-1 pooling."""
    dtype = np.dtype(dtype)
    if dtype.kind == "f":
        return -np.inf
    return np.iinfo(dtype).min


def spool(x: np.ndarray, stride: int, fill=None) -> np.ndarray:
    """2x2 max pooling of a (..., H, W) array; pads bottom/right with ``fill``."""
    if fill is None:
        fill = pool_fill(x.dtype)
    h, w = x.shape[-2:]
    oh, ow = -(-h // stride), -(-w // stride)
    ph = (oh - 1) * stride + 2 - h
    pw = (ow - 1) * stride + 2 - w
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    xp = np.pad(x, widths, constant_values=fill)
    return pool_region(xp, stride, oh, ow)


def pool_region(xp: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    """Max over 2x2 windows of an already padded region."""
    out = None
    for u in range(2):
        for v in range(2):
            tap = xp[..., u : u + (oh - 1) * stride + 1 : stride, v : v + (ow - 1) * stride + 1 : stride]
            out = tap if out is None else np.maximum(out, tap)
    return out


# executor kernels


def conv_accumulate(xpad: np.ndarray, kernel: np.ndarray, binary: bool) -> np.ndarray:
    """Accumulate a convolution over all input channels of a padded region.

    ``xpad`` is (N, h+K-1, w+K-1) and ``kernel`` is (C, N, K, K).  In binary
    mode ``kernel`` holds +-1 signs and ``xpad`` integer codes; the sum is an
    exact integer (int64 in a direct loop for small output groups, float64
    through BLAS otherwise), so any reduction order gives the same bits.  In float mode both are float32 and the sum runs input channel by
    input channel, tap by tap, one float32 multiply and add per element.
    """
    c, n, k, _ = kernel.shape
    h = xpad.shape[-2] - k + 1
    w = xpad.shape[-1] - k + 1
    if binary:
        if c <= 8:
            # few output channels (one streamed group): a direct loop beats building patches
            acc = np.zeros((c, h, w), dtype=np.int64)
            _accumulate_int(np.ascontiguousarray(xpad, dtype=np.int32), np.ascontiguousarray(kernel, dtype=np.int32), acc)
        else:
            patches = sliding_window_view(xpad.astype(np.float64), (k, k), axis=(-2, -1))
            acc = np.tensordot(kernel, patches, axes=([1, 2, 3], [0, 3, 4]))
        if acc.size and np.abs(acc).max() >= 2**31:
            raise OverflowError("binary accumulator exceeds 32 bits")
        return acc
    acc = np.zeros((c, h, w), dtype=np.float32)
    _accumulate_f32(np.ascontiguousarray(xpad, dtype=np.float32), np.ascontiguousarray(kernel, dtype=np.float32), acc)
    return acc


@njit(cache=True)
def _accumulate_int(xpad, kernel, acc):
    c_out, n_in, k, _ = kernel.shape
    h, w = acc.shape[1], acc.shape[2]
    for c in range(c_out):
        for n in range(n_in):
            for u in range(k):
                for v in range(k):
                    wv = kernel[c, n, u, v]
                    for y in range(h):
                        for x in range(w):
                            acc[c, y, x] += wv * xpad[n, y + u, x + v]


@njit(cache=True)
def _accumulate_f32(xpad, kernel, acc):
    c_out, n_in, k, _ = kernel.shape
    h, w = acc.shape[1], acc.shape[2]
    for c in range(c_out):
        for n in range(n_in):
            for u in range(k):
                for v in range(k):
                    wv = kernel[c, n, u, v]
                    for y in range(h):
                        for x in range(w):
                            acc[c, y, x] += wv * xpad[n, y + u, x + v]


def conv_finish(acc: np.ndarray, scales: Optional[np.ndarray], bias: Optional[np.ndarray], step: float, binary: bool) -> np.ndarray:
    """Turn accumulators into float32 pre-activations (scale, input step, bias)."""
    if binary:
        # integer accumulators below 2**24 convert to float32 exactly
        out = acc.astype(np.float32) * scales.reshape(-1, 1, 1) * np.float32(step)
    else:
        out = acc.astype(np.float32, copy=False)
    if bias is not None:
        out = out + bias.reshape(-1, 1, 1)
    return out


def dequantize_input(codes: np.ndarray, bits: int, step: float, binary: bool) -> np.ndarray:
    """Executor-side view of stored input elements for the accumulate step."""
    if bits == 32:
        if binary:
            raise UnsupportedModeError("binary weights need integer-coded inputs")
        return codes.astype(np.float32, copy=False)
    if binary:
        return codes
    return codes.astype(np.float32) * np.float32(step)


# Tensor-level operations


def _kernel_for(weights, binary: bool) -> np.ndarray:
    return weights.signs() if binary else weights.values


def conv_forward(inp: Tensor, weights, p: ConvParams, step: float = 1.0) -> Tensor:
    """Convolve a whole stored feature-map set; returns float32 pre-activations."""
    if inp.channels != p.in_channels:
        raise ShapeError(f"input has {inp.channels} channels, layer expects {p.in_channels}")
    binary = weights.scheme == "binary1"
    x = dequantize_input(inp.to_array(), inp.bits, step, binary)
    acc = conv_accumulate(_pad_hw(x, p.padding), _kernel_for(weights, binary), binary)
    return Tensor.from_array(conv_finish(acc, weights.scales, weights.bias, step, binary), 32)


def xpool_forward(inp, p: XPoolParams):
    """Cross-channel pooling of a Tensor or a (channels, h, w) block group."""
    if isinstance(inp, Tensor):
        pooled, trace = xpool(inp.to_array(), p.alpha, p.op)
        return Tensor.from_array(pooled, inp.bits), trace
    return xpool(inp, p.alpha, p.op)


def spool_forward(inp: Tensor, p: SPoolParams) -> Tensor:
    arr = inp.to_array()
    return Tensor.from_array(spool(arr, p.stride), inp.bits)


def conv_backward(grad_out: np.ndarray, inp: np.ndarray, weights):
    """Full-precision adjoints; quantized layers have no backward pass."""
    if weights.scheme != "full32":
        raise UnsupportedModeError("conv_backward supports only full32 weights")
    return conv2d_backward(np.asarray(grad_out, dtype=np.float64), np.asarray(inp, dtype=np.float64), weights.values.astype(np.float64))
