"""Network descriptions, the built-in Tiny-YOLOv2 / Condensation-Net topologies,
and the binary weight-file format.

Network text format, one statement per line, ``#`` starts a comment::

    input 512 512 3 8          # height width channels bits
    quant w1a2                 # or full32
    conv out=32 in=3 k=3 alpha=2 pool=max act=hwgq delta=0.5
    spool stride=2

``out`` counts the filters of the convolution, i.e. the expanded channel count;
with ``alpha > 1`` the layer stores ``out / alpha`` channels after
cross-channel pooling.  ``in`` is optional and checked against the chain.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .layers import ConvParams, SPoolParams, XPoolParams
from .quant import ActQuantizer, binarize_weights, signs
from .tensor import tensor_nbytes

SCHEMES = ("full32", "w1a2")
WEIGHT_MAGIC = b"CNDW"
WEIGHT_VERSION = 1
SCHEME_CODES = {"full32": 0, "binary1": 1}


class NetworkError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class WeightFormatError(ValueError):
    def __init__(self, message: str, layer: Optional[int] = None):
        self.layer = layer
        super().__init__(f"layer {layer}: {message}" if layer is not None else message)


@dataclass(frozen=True)
class ConvLayer:
    out: int
    kernel: int = 3
    alpha: int = 1
    pool: str = "max"
    act: ActQuantizer = field(default_factory=ActQuantizer)
    kind = "conv"

    @property
    def condensed(self) -> int:
        return self.out // self.alpha

    @property
    def xpool(self) -> XPoolParams:
        return XPoolParams(self.alpha, self.pool)


@dataclass(frozen=True)
class PoolLayer:
    stride: int = 2
    kind = "spool"

    @property
    def params(self) -> SPoolParams:
        return SPoolParams(self.stride)


LayerSpec = Union[ConvLayer, PoolLayer]


@dataclass(frozen=True)
class FeatureSet:
    """One feature-map set of a network; ``virtual`` sets feed cross-channel pooling."""

    name: str
    layer: int  # index into NetworkDef.layers, 1-based; 0 is the input
    channels: int
    height: int
    width: int
    bits: int
    virtual: bool = False

    def nbytes(self, bits: Optional[int] = None) -> int:
        return tensor_nbytes(self.height, self.width, self.channels, bits or self.bits)


@dataclass(frozen=True)
class NetworkDef:
    height: int
    width: int
    channels: int
    bits: int
    layers: tuple
    scheme: str = "full32"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self, lines: Optional[list] = None) -> None:
        def fail(msg, i=None):
            raise NetworkError(msg, lines[i] if lines is not None and i is not None else None)

        if self.scheme not in SCHEMES:
            fail(f"unknown quant scheme {self.scheme!r}")
        if min(self.height, self.width, self.channels) < 1:
            fail("input dimensions must be positive")
        allowed_bits = (8,) if self.scheme == "w1a2" else (8, 32)
        if self.bits not in allowed_bits:
            fail(f"input bits must be one of {allowed_bits} for {self.scheme}")
        if not any(isinstance(layer, ConvLayer) for layer in self.layers):
            fail("network needs at least one conv layer")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ConvLayer):
                try:
                    ConvParams(layer.out, 1, layer.kernel)
                    XPoolParams(layer.alpha, layer.pool)
                except ValueError as e:
                    fail(str(e), i)
                if layer.out % layer.alpha:
                    fail(f"alpha={layer.alpha} does not divide {layer.out} expanded channels", i)
                if self.scheme == "w1a2" and not layer.act.quantized:
                    fail("w1a2 networks need act=hwgq on every conv layer", i)
                if self.scheme == "full32" and layer.act.quantized:
                    fail("full32 networks cannot use act=hwgq", i)
            elif isinstance(layer, PoolLayer):
                try:
                    layer.params
                except ValueError as e:
                    fail(str(e), i)
            else:
                fail(f"unknown layer {layer!r}", i)

    @property
    def convs(self) -> list[ConvLayer]:
        return [layer for layer in self.layers if isinstance(layer, ConvLayer)]

    def conv_params(self) -> list[ConvParams]:
        """ConvParams of every conv layer in order, with chained input counts."""
        out = []
        c = self.channels
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                out.append(ConvParams(layer.out, c, layer.kernel))
                c = layer.condensed
        return out

    def walk(self):
        """Yield (index, layer, in_shape, out_shape) with shapes as (C, H, W, bits)."""
        c, h, w, bits = self.channels, self.height, self.width, self.bits
        for i, layer in enumerate(self.layers, start=1):
            if isinstance(layer, ConvLayer):
                out = (layer.condensed, h, w, layer.act.out_bits)
            else:
                p = layer.params
                out = (c, p.out_size(h), p.out_size(w), bits)
            yield i, layer, (c, h, w, bits), out
            c, h, w, bits = out

    @property
    def output_shape(self) -> tuple[int, int, int, int]:
        *_, last = self.walk()
        return last[3]

    def feature_sets(self) -> list[FeatureSet]:
        """All feature-map sets in execution order, expanded (virtual) ones included."""
        sets = [FeatureSet("input", 0, self.channels, self.height, self.width, self.bits)]
        nconv = npool = 0
        for i, layer, _, (c, h, w, bits) in self.walk():
            if isinstance(layer, ConvLayer):
                nconv += 1
                if layer.alpha > 1:
                    sets.append(FeatureSet(f"conv{nconv}.virtual", i, layer.out, h, w, bits, virtual=True))
                sets.append(FeatureSet(f"conv{nconv}", i, c, h, w, bits))
            else:
                npool += 1
                sets.append(FeatureSet(f"pool{npool}", i, c, h, w, bits))
        return sets

    def to_text(self) -> str:
        lines = [f"input {self.height} {self.width} {self.channels} {self.bits}", f"quant {self.scheme}"]
        params = iter(self.conv_params())
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                p = next(params)
                act = layer.act
                s = f"conv out={layer.out} in={p.in_channels} k={layer.kernel} alpha={layer.alpha} pool={layer.pool}"
                if act.mode == "hwgq2":
                    s += f" act=hwgq delta={act.delta!r}"
                elif act.mode == "leaky":
                    s += f" act=leaky slope={act.slope!r}"
                else:
                    s += f" act={act.mode}"
                lines.append(s)
            else:
                lines.append(f"spool stride={layer.stride}")
        return "\n".join(lines) + "\n"


_CONV_KEYS = {"out", "in", "k", "alpha", "pool", "act", "delta", "slope"}
_ACT_NAMES = {"hwgq": "hwgq2", "hwgq2": "hwgq2", "relu": "relu", "leaky": "leaky", "identity": "identity", "linear": "identity"}


def _kv(tokens, lineno, allowed):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise NetworkError(f"expected key=value, got {tok!r}", lineno)
        k, v = tok.split("=", 1)
        if k not in allowed:
            raise NetworkError(f"unknown key {k!r}", lineno)
        if k in out:
            raise NetworkError(f"duplicate key {k!r}", lineno)
        out[k] = v
    return out


def _int(v, key, lineno):
    try:
        return int(v)
    except ValueError:
        raise NetworkError(f"{key} must be an integer, got {v!r}", lineno) from None


def _float(v, key, lineno):
    try:
        return float(v)
    except ValueError:
        raise NetworkError(f"{key} must be a number, got {v!r}", lineno) from None


def parse_network(text: str) -> NetworkDef:
    inp = None
    scheme = "full32"
    layers: list = []
    layer_lines: list = []
    channels = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        head, args = tokens[0], tokens[1:]
        if head == "input":
            if inp is not None:
                raise NetworkError("duplicate input statement", lineno)
            if len(args) != 4:
                raise NetworkError("input takes: height width channels bits", lineno)
            inp = tuple(_int(a, "input", lineno) for a in args)
            channels = inp[2]
        elif head == "quant":
            if len(args) != 1 or args[0] not in SCHEMES:
                raise NetworkError(f"quant takes one of {SCHEMES}", lineno)
            scheme = args[0]
        elif head == "conv":
            if inp is None:
                raise NetworkError("conv before input statement", lineno)
            kv = _kv(args, lineno, _CONV_KEYS)
            if "out" not in kv:
                raise NetworkError("conv needs out=", lineno)
            out = _int(kv["out"], "out", lineno)
            alpha = _int(kv.get("alpha", "1"), "alpha", lineno)
            if "in" in kv and _int(kv["in"], "in", lineno) != channels:
                raise NetworkError(f"channel chain mismatch: in={kv['in']} but previous layer stores {channels}", lineno)
            if alpha < 1 or out % alpha:
                raise NetworkError(f"alpha={alpha} does not divide {out} expanded channels", lineno)
            mode = _ACT_NAMES.get(kv.get("act", "leaky"))
            if mode is None:
                raise NetworkError(f"unknown act {kv['act']!r}", lineno)
            try:
                act = ActQuantizer(
                    mode,
                    slope=_float(kv.get("slope", "0.1"), "slope", lineno),
                    delta=_float(kv.get("delta", "0.5"), "delta", lineno),
                )
            except ValueError as e:
                raise NetworkError(str(e), lineno) from None
            layers.append(ConvLayer(out, _int(kv.get("k", "3"), "k", lineno), alpha, kv.get("pool", "max"), act))
            layer_lines.append(lineno)
            channels = out // alpha
        elif head == "spool":
            if inp is None:
                raise NetworkError("spool before input statement", lineno)
            kv = _kv(args, lineno, {"stride"})
            layers.append(PoolLayer(_int(kv.get("stride", "2"), "stride", lineno)))
            layer_lines.append(lineno)
        else:
            raise NetworkError(f"unknown statement {head!r}", lineno)
    if inp is None:
        raise NetworkError("missing input statement")
    net = object.__new__(NetworkDef)
    for name, value in zip(("height", "width", "channels", "bits"), inp):
        object.__setattr__(net, name, value)
    object.__setattr__(net, "layers", tuple(layers))
    object.__setattr__(net, "scheme", scheme)
    net.validate(lines=layer_lines)
    return net


def _table1_layers(alpha: int, scheme: str, op: str) -> list:
    quantized = scheme == "w1a2"
    hidden = ActQuantizer("hwgq2") if quantized else ActQuantizer("leaky", 0.1)
    last = ActQuantizer("hwgq2") if quantized else ActQuantizer("identity")
    layers: list = []
    for n in (16, 32, 64, 128):
        layers += [ConvLayer(n * alpha, 3, alpha, op, hidden), PoolLayer(2)]
    layers += [ConvLayer(256, 3, 1, op, hidden), PoolLayer(2)]
    layers += [ConvLayer(512, 3, 1, op, hidden), PoolLayer(1)]
    layers += [ConvLayer(1024, 3, 1, op, hidden), ConvLayer(1024, 3, 1, op, hidden), ConvLayer(30, 1, 1, op, last)]
    return layers


def build_tiny_yolov2(size: int = 512, scheme: str = "w1a2") -> NetworkDef:
    return NetworkDef(size, size, 3, 8, _table1_layers(1, scheme, "max"), scheme)


def build_condensation(alpha: int = 2, size: int = 512, scheme: str = "w1a2", op: str = "max") -> NetworkDef:
    """Tiny-YOLOv2 with conv layers 1-4 expanded alpha-fold and condensed by
    cross-channel pooling.  ``alpha == 1`` is Tiny-YOLOv2 itself."""
    if alpha not in (1, 2, 4):
        raise NetworkError(f"unsupported alpha {alpha}; choose 1, 2 or 4")
    return NetworkDef(size, size, 3, 8, _table1_layers(alpha, scheme, op), scheme)


def builtin_network(name: str, size: int = 512, scheme: str = "w1a2") -> NetworkDef:
    """Resolve ``tiny-yolov2`` or ``condensation:ALPHA``."""
    key = name.strip().lower().replace("_", "-")
    if key in ("tiny-yolov2", "tinyyolov2", "tiny-yolo"):
        return build_tiny_yolov2(size, scheme)
    if key.startswith("condensation"):
        _, _, rest = key.partition(":")
        try:
            alpha = int(rest or 2)
        except ValueError:
            raise NetworkError(f"bad alpha in {name!r}") from None
        return build_condensation(alpha, size, scheme)
    raise NetworkError(f"unknown builtin network {name!r}")


# weights


@dataclass(eq=False)
class LayerWeights:
    """Filter bank of one conv layer in (out, in, ky, kx) order."""

    scheme: str
    values: Optional[np.ndarray] = None  # float32, full32 scheme
    codes: Optional[np.ndarray] = None  # bool, binary1 scheme (True is +1)
    scales: Optional[np.ndarray] = None  # float32 per output channel
    bias: Optional[np.ndarray] = None  # float32 per output channel

    def __post_init__(self):
        if self.scheme not in SCHEME_CODES:
            raise WeightFormatError(f"unknown weight scheme {self.scheme!r}")
        bank = self.values if self.scheme == "full32" else self.codes
        if bank is None or bank.ndim != 4:
            raise WeightFormatError(f"{self.scheme} layer needs a 4-d filter bank")
        if self.scheme == "full32":
            self.values = np.asarray(self.values, dtype=np.float32)
            if self.scales is None:
                self.scales = np.ones(self.shape[0], dtype=np.float32)
        else:
            self.codes = np.asarray(self.codes, dtype=bool)
            if self.scales is None:
                raise WeightFormatError("binary1 layer needs per-channel scales")
        self.scales = np.asarray(self.scales, dtype=np.float32)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float32)

    @property
    def shape(self) -> tuple:
        return (self.values if self.scheme == "full32" else self.codes).shape

    def signs(self) -> np.ndarray:
        """+-1 bank in float64; cached, so treat the codes as immutable."""
        if getattr(self, "_signs", None) is None:
            self._signs = signs(self.codes)
        return self._signs

    def dense(self) -> np.ndarray:
        """float64 weights as the convolution sees them (+-scale for binary)."""
        if self.scheme == "full32":
            return self.values.astype(np.float64)
        return self.signs() * self.scales.astype(np.float64).reshape(-1, 1, 1, 1)

    def to_bytes(self) -> bytes:
        out, inp, k, _ = self.shape
        parts = [struct.pack("<IIIB", out, inp, k, SCHEME_CODES[self.scheme])]
        parts.append(self.scales.astype("<f4").tobytes())
        if self.bias is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01" + self.bias.astype("<f4").tobytes())
        if self.scheme == "binary1":
            parts.append(np.packbits(self.codes.ravel(), bitorder="little").tobytes())
        else:
            parts.append(self.values.astype("<f4").tobytes())
        return b"".join(parts)

    def __eq__(self, other):
        if not isinstance(other, LayerWeights):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


@dataclass(eq=False)
class WeightStore:
    layers: list

    def to_bytes(self) -> bytes:
        head = WEIGHT_MAGIC + struct.pack("<II", WEIGHT_VERSION, len(self.layers))
        return head + b"".join(lw.to_bytes() for lw in self.layers)

    def __eq__(self, other):
        if not isinstance(other, WeightStore):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> LayerWeights:
        return self.layers[i]

    @classmethod
    def from_bytes(cls, blob: bytes, net: Optional[NetworkDef] = None) -> "WeightStore":
        reader = _Reader(blob)
        magic = reader.take(4, None, "magic")
        if magic != WEIGHT_MAGIC:
            raise WeightFormatError(f"bad magic {magic!r}")
        version, count = struct.unpack("<II", reader.take(8, None, "header"))
        if version != WEIGHT_VERSION:
            raise WeightFormatError(f"unsupported version {version}")
        expected = net.conv_params() if net is not None else None
        if expected is not None and count != len(expected):
            raise WeightFormatError(f"file has {count} layers, network has {len(expected)} conv layers")
        layers = []
        inv_codes = {v: k for k, v in SCHEME_CODES.items()}
        for i in range(count):
            out, inp, k, sc = struct.unpack("<IIIB", reader.take(13, i, "layer header"))
            if sc not in inv_codes:
                raise WeightFormatError(f"unknown scheme code {sc}", i)
            scheme = inv_codes[sc]
            if expected is not None:
                p = expected[i]
                if (out, inp, k) != (p.out_channels, p.in_channels, p.kernel):
                    raise WeightFormatError(
                        f"shape {out}x{inp}x{k}x{k} does not match network {p.out_channels}x{p.in_channels}x{p.kernel}x{p.kernel}",
                        i,
                    )
                want = "binary1" if net.scheme == "w1a2" else "full32"
                if scheme != want:
                    raise WeightFormatError(f"scheme {scheme} but network is {net.scheme}", i)
            scales = np.frombuffer(reader.take(4 * out, i, "scales"), dtype="<f4").astype(np.float32)
            flag = reader.take(1, i, "bias flag")[0]
            if flag not in (0, 1):
                raise WeightFormatError(f"bad bias flag {flag}", i)
            bias = np.frombuffer(reader.take(4 * out, i, "biases"), dtype="<f4").astype(np.float32) if flag else None
            count_w = out * inp * k * k
            if scheme == "binary1":
                raw = np.frombuffer(reader.take((count_w + 7) // 8, i, "codes"), dtype=np.uint8)
                codes = np.unpackbits(raw, bitorder="little")[:count_w].astype(bool).reshape(out, inp, k, k)
                layers.append(LayerWeights("binary1", codes=codes, scales=scales, bias=bias))
            else:
                vals = np.frombuffer(reader.take(4 * count_w, i, "weights"), dtype="<f4").astype(np.float32)
                layers.append(LayerWeights("full32", values=vals.reshape(out, inp, k, k), scales=scales, bias=bias))
        if reader.remaining:
            raise WeightFormatError(f"{reader.remaining} trailing bytes after last layer")
        return cls(layers)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    @property
    def remaining(self) -> int:
        return len(self.blob) - self.pos

    def take(self, n: int, layer, what: str) -> bytes:
        if self.remaining < n:
            raise WeightFormatError(f"truncated {what}: need {n} bytes, {self.remaining} left", layer)
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk


def save_weights(path, store: WeightStore) -> None:
    with open(path, "wb") as f:
        f.write(store.to_bytes())


def load_weights(path, net: Optional[NetworkDef] = None) -> WeightStore:
    with open(path, "rb") as f:
        return WeightStore.from_bytes(f.read(), net)


def init_random_weights(net: NetworkDef, seed: int, bias: bool = True) -> WeightStore:
    """Seeded weights: uniform [-0.5, 0.5] float32, binarized for w1a2 networks."""
    rng = np.random.default_rng(seed)
    layers = []
    for p in net.conv_params():
        w = rng.uniform(-0.5, 0.5, (p.out_channels, p.in_channels, p.kernel, p.kernel)).astype(np.float32)
        b = rng.uniform(-0.25, 0.25, p.out_channels).astype(np.float32) if bias else None
        if net.scheme == "w1a2":
            codes, scales = binarize_weights(w)
            layers.append(LayerWeights("binary1", codes=codes, scales=scales, bias=b))
        else:
            layers.append(LayerWeights("full32", values=w, bias=b))
    return WeightStore(layers)
