"""Weight binarization and low-bit activation quantization (W1A2), plus the float path."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HWGQ_LEVELS = 4


class QuantError(ValueError):
    pass


def binarize_weights(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Binarize an (out, ...) filter bank.

    Returns boolean sign codes (True for w >= 0, so sign(0) is +1) and one
    float32 scale per output channel, equal to the mean absolute weight of
    that channel's filter.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise QuantError("cannot binarize an empty filter bank")
    flat = w.reshape(w.shape[0], -1)
    scales = np.abs(flat).mean(axis=1).astype(np.float32)
    zero = np.flatnonzero(scales <= 0)
    if zero.size:
        raise QuantError(
            f"output channel {int(zero[0])} has an all-zero filter (scale 0); use the full32 scheme"
        )
    return w >= 0, scales


def dequantize_weights(codes: np.ndarray, scales: np.ndarray) -> np.ndarray:
    signs = np.where(codes, 1.0, -1.0)
    shape = (-1,) + (1,) * (signs.ndim - 1)
    return signs * np.asarray(scales, dtype=np.float64).reshape(shape)


def signs(codes: np.ndarray) -> np.ndarray:
    return np.where(codes, 1.0, -1.0)


@dataclass(frozen=True)
class ActQuantizer:
    """Activation function applied after convolution.

    ``hwgq2`` is the half-wave 2-bit quantizer: non-positive inputs map to code
    0, positive inputs round to the nearest of the uniform levels
    {0, delta, 2*delta, 3*delta} and saturate at code 3.
    """

    mode: str = "leaky"
    slope: float = 0.1
    delta: float = 0.5

    def __post_init__(self):
        if self.mode not in ("identity", "relu", "leaky", "hwgq2"):
            raise QuantError(f"unknown activation {self.mode!r}")
        if self.mode == "hwgq2" and not self.delta > 0:
            raise QuantError("hwgq2 step must be positive")

    @property
    def quantized(self) -> bool:
        return self.mode == "hwgq2"

    @property
    def out_bits(self) -> int:
        return 2 if self.quantized else 32

    def __call__(self, x):
        return quantize_act(x, self)

    def dequantize(self, codes: np.ndarray) -> np.ndarray:
        if not self.quantized:
            return np.asarray(codes)
        return np.asarray(codes, dtype=np.float64) * self.delta


def quantize_act(x, q: ActQuantizer):
    """Apply ``q`` elementwise.  Real arrays stay real unless ``q`` is hwgq2,
    which returns uint8 codes.  Keeps float32 inputs in float32."""
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise QuantError("non-finite activation input")
    if q.mode == "identity":
        return arr
    if q.mode == "relu":
        return np.where(arr > 0, arr, arr.dtype.type(0) if arr.dtype.kind == "f" else 0)
    if q.mode == "leaky":
        slope = arr.dtype.type(q.slope) if arr.dtype.kind == "f" else q.slope
        return np.where(arr > 0, arr, arr * slope)
    codes = np.floor(arr.astype(np.float64) / q.delta + 0.5)
    codes = np.where(arr > 0, np.clip(codes, 0, HWGQ_LEVELS - 1), 0).astype(np.uint8)
    return codes if codes.ndim else int(codes)
