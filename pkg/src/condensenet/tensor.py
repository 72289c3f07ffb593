"""Feature-map tensors with low-bit packed storage, and block extraction/insertion.

Storage layout is channel-major, then row-major.  2-bit and 8-bit tensors hold
unsigned integer codes; 2-bit elements are packed least-significant-first within
each byte and every row is padded to a byte boundary.  32-bit tensors hold
IEEE-754 float32 values, little endian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterator

import numpy as np

VALID_BITS = (2, 8, 32)
SNAPSHOT_MAGIC = b"CNFM"
SNAPSHOT_VERSION = 1
ACC_BYTES = 4  # every working-buffer element is a 32-bit accumulator


class BoundsError(IndexError):
    pass


class FormatError(ValueError):
    pass


def row_bytes(width: int, bits: int) -> int:
    return (width * bits + 7) // 8


def tensor_nbytes(height: int, width: int, channels: int, bits: int) -> int:
    return channels * height * row_bytes(width, bits)


def max_code(bits: int) -> int:
    return (1 << bits) - 1


def pack(values: np.ndarray, bits: int) -> bytes:
    """Pack a (C, H, W) array into the storage byte layout."""
    if bits not in VALID_BITS:
        raise ValueError(f"unsupported bit width {bits}")
    if bits == 32:
        return np.ascontiguousarray(values, dtype="<f4").tobytes()
    codes = np.asarray(values)
    if codes.size and (codes.min() < 0 or codes.max() > max_code(bits)):
        raise ValueError(f"codes out of range for {bits}-bit storage")
    codes = codes.astype(np.uint8)
    if bits == 8:
        return codes.tobytes()
    c, h, w = codes.shape
    # expand each code into its bits, LSB first, then pad each row to whole bytes
    shifts = np.arange(bits, dtype=np.uint8)
    bitplanes = (codes[..., None] >> shifts) & 1
    bitrows = bitplanes.reshape(c, h, w * bits)
    pad = row_bytes(w, bits) * 8 - w * bits
    if pad:
        bitrows = np.pad(bitrows, ((0, 0), (0, 0), (0, pad)))
    return np.packbits(bitrows, axis=-1, bitorder="little").tobytes()


def unpack(data: bytes, height: int, width: int, channels: int, bits: int) -> np.ndarray:
    expected = tensor_nbytes(height, width, channels, bits)
    if len(data) != expected:
        raise FormatError(f"expected {expected} data bytes, got {len(data)}")
    if bits == 32:
        return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(channels, height, width)
    raw = np.frombuffer(data, dtype=np.uint8)
    if bits == 8:
        return raw.reshape(channels, height, width).copy()
    rows = raw.reshape(channels, height, row_bytes(width, bits))
    bitrows = np.unpackbits(rows, axis=-1, bitorder="little")[..., : width * bits]
    bitplanes = bitrows.reshape(channels, height, width, bits)
    weights = (1 << np.arange(bits)).astype(np.uint8)
    return (bitplanes * weights).sum(axis=-1).astype(np.uint8)


@dataclass(frozen=True)
class Tensor:
    height: int
    width: int
    channels: int
    bits: int
    data: bytes = field(repr=False)

    def __post_init__(self):
        if self.bits not in VALID_BITS:
            raise ValueError(f"unsupported bit width {self.bits}")
        if len(self.data) != self.nbytes:
            raise FormatError(f"data length {len(self.data)} != {self.nbytes}")

    @classmethod
    def from_array(cls, values: np.ndarray, bits: int) -> "Tensor":
        values = np.asarray(values)
        if values.ndim != 3:
            raise ValueError("tensor arrays are (channels, height, width)")
        c, h, w = values.shape
        return cls(h, w, c, bits, pack(values, bits))

    @classmethod
    def zeros(cls, height: int, width: int, channels: int, bits: int) -> "Tensor":
        return cls(height, width, channels, bits, bytes(tensor_nbytes(height, width, channels, bits)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def nbytes(self) -> int:
        return tensor_nbytes(self.height, self.width, self.channels, self.bits)

    @cached_property
    def _array(self) -> np.ndarray:
        arr = unpack(self.data, self.height, self.width, self.channels, self.bits)
        arr.flags.writeable = False
        return arr

    def to_array(self) -> np.ndarray:
        """Dense (C, H, W) copy: uint8 codes for low-bit tensors, float32 otherwise."""
        return self._array.copy()

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and self.bits == other.bits and self.data == other.data

    def __hash__(self):
        return hash((self.shape, self.bits, self.data))

    def to_bytes(self) -> bytes:
        header = SNAPSHOT_MAGIC + struct.pack(
            "<5I", SNAPSHOT_VERSION, self.height, self.width, self.channels, self.bits
        )
        return header + self.data

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Tensor":
        if len(blob) < 24:
            raise FormatError(f"snapshot truncated: {len(blob)} bytes, header needs 24")
        if blob[:4] != SNAPSHOT_MAGIC:
            raise FormatError(f"bad snapshot magic {blob[:4]!r}")
        version, h, w, c, bits = struct.unpack_from("<5I", blob, 4)
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot version {version}")
        if bits not in VALID_BITS:
            raise FormatError(f"unsupported bit width {bits}")
        payload = blob[24:]
        expected = tensor_nbytes(h, w, c, bits)
        if len(payload) != expected:
            raise FormatError(
                f"snapshot {h}x{w}x{c}@{bits} needs {expected} data bytes, found {len(payload)}"
            )
        return cls(h, w, c, bits, payload)


def save_snapshot(path, t: Tensor) -> None:
    with open(path, "wb") as f:
        f.write(t.to_bytes())


def load_snapshot(path) -> Tensor:
    with open(path, "rb") as f:
        return Tensor.from_bytes(f.read())


@dataclass
class Block:
    """Working copy of one channel's rectangular region, widened to 32 bits."""

    channel: int
    origin_y: int
    origin_x: int
    values: np.ndarray

    @property
    def block_h(self) -> int:
        return self.values.shape[0]

    @property
    def block_w(self) -> int:
        return self.values.shape[1]

    @property
    def nbytes(self) -> int:
        return self.values.size * ACC_BYTES


Rect = tuple[int, int, int, int]  # (y, x, h, w)


@dataclass(frozen=True)
class BlockPlan:
    """Spatial tiling of a channel plane.  ``None`` extents mean the full plane."""

    block_h: int | None = 32
    block_w: int | None = 32
    traversal: str = "row"

    def __post_init__(self):
        for ext in (self.block_h, self.block_w):
            if ext is not None and ext < 1:
                raise ValueError("block extents must be positive")
        if self.traversal not in ("row", "col"):
            raise ValueError(f"unknown traversal {self.traversal!r}")

    @classmethod
    def full(cls) -> "BlockPlan":
        return cls(None, None)

    @classmethod
    def parse(cls, text: str, traversal: str = "row") -> "BlockPlan":
        """Accepts ``32``, ``16x8`` or ``full``."""
        text = text.strip().lower()
        if text == "full":
            return cls(None, None, traversal)
        if "x" in text:
            h, w = text.split("x", 1)
            return cls(int(h), int(w), traversal)
        return cls(int(text), int(text), traversal)

    def __str__(self):
        if self.block_h is None and self.block_w is None:
            return "full"
        return f"{self.block_h or 'H'}x{self.block_w or 'W'}"

    def extent(self, height: int, width: int) -> tuple[int, int]:
        """Largest block actually used on a height x width plane."""
        bh = height if self.block_h is None else min(self.block_h, height)
        bw = width if self.block_w is None else min(self.block_w, width)
        return bh, bw

    def blocks(self, height: int, width: int) -> Iterator[Rect]:
        bh, bw = self.extent(height, width)
        ys = range(0, height, bh)
        xs = range(0, width, bw)
        if self.traversal == "row":
            order = ((y, x) for y in ys for x in xs)
        else:
            order = ((y, x) for x in xs for y in ys)
        for y, x in order:
            yield (y, x, min(bh, height - y), min(bw, width - x))


def _check_rect(t_h: int, t_w: int, rect: Rect) -> None:
    y, x, h, w = rect
    if h < 0 or w < 0 or y < 0 or x < 0 or y + h > t_h or x + w > t_w:
        raise BoundsError(f"rect {rect} outside {t_h}x{t_w} plane")


def _widen(arr: np.ndarray, bits: int) -> np.ndarray:
    return arr.astype(np.float32) if bits == 32 else arr.astype(np.int32)


def extract_block(t: Tensor, channel: int, rect: Rect) -> Block:
    if not 0 <= channel < t.channels:
        raise BoundsError(f"channel {channel} outside 0..{t.channels - 1}")
    _check_rect(t.height, t.width, rect)
    y, x, h, w = rect
    values = _widen(t._array[channel, y : y + h, x : x + w], t.bits)
    return Block(channel, y, x, values)


def extract_region(t: Tensor, rect: Rect) -> np.ndarray:
    """The same region of every channel as one widened (C, h, w) working copy."""
    _check_rect(t.height, t.width, rect)
    y, x, h, w = rect
    return _widen(t._array[:, y : y + h, x : x + w], t.bits)


def saturate(values: np.ndarray, bits: int) -> np.ndarray:
    """Default narrowing: round-free clamp to the representable code range.

    Out-of-range values saturate at 0 or the maximum code, never wrap.  32-bit
    tensors take the value as float32.
    """
    if bits == 32:
        return np.asarray(values, dtype=np.float32)
    values = np.asarray(values)
    if values.dtype.kind == "f" and not np.all(values == np.floor(values)):
        raise ValueError("low-bit narrowing needs integral values")
    return np.clip(values, 0, max_code(bits)).astype(np.uint8)


Narrowing = Callable[[np.ndarray, int], np.ndarray]


class TensorWriter:
    """Single-owner mutable feature-map set, frozen into a Tensor when complete."""

    def __init__(self, height: int, width: int, channels: int, bits: int, base: Tensor | None = None):
        if bits not in VALID_BITS:
            raise ValueError(f"unsupported bit width {bits}")
        self.height, self.width, self.channels, self.bits = height, width, channels, bits
        if base is not None:
            self._buf = base.to_array()
        else:
            dtype = np.float32 if bits == 32 else np.uint8
            self._buf = np.zeros((channels, height, width), dtype=dtype)

    def insert(self, b: Block, quantize: Narrowing = saturate) -> None:
        if not 0 <= b.channel < self.channels:
            raise BoundsError(f"channel {b.channel} outside 0..{self.channels - 1}")
        rect = (b.origin_y, b.origin_x, b.block_h, b.block_w)
        _check_rect(self.height, self.width, rect)
        self._buf[b.channel, b.origin_y : b.origin_y + b.block_h, b.origin_x : b.origin_x + b.block_w] = quantize(
            b.values, self.bits
        )

    def freeze(self) -> Tensor:
        return Tensor.from_array(self._buf, self.bits)


def insert_block(t: Tensor, b: Block, quantize: Narrowing = saturate) -> Tensor:
    """Return a new tensor with the block's region overwritten."""
    w = TensorWriter(t.height, t.width, t.channels, t.bits, base=t)
    w.insert(b, quantize)
    return w.freeze()
