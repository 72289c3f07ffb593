"""Reference and block-streaming executors with feature-map traffic accounting.

The reference executor materializes every feature-map set, the expanded
(virtual) ones included.  The streaming executor runs the four-level loop
layer -> output channel -> block -> input channel: for each condensed output
channel and block it accumulates the ``alpha`` expanded blocks over all input
channels, activates them, condenses them with cross-channel pooling, and writes
one output block.  Expanded sets never reach feature-map storage.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import layers as L
from .netdef import ConvLayer, NetworkDef, WeightStore
from .tensor import ACC_BYTES, Block, BlockPlan, Tensor, TensorWriter, extract_block, extract_region

LOG_COLUMNS = ("layer", "set", "virtual", "bytes_read", "bytes_written", "peak_buffer_bytes")


class BufferOverflow(AssertionError):
    pass


@dataclass
class SetRecord:
    layer: int
    name: str
    virtual: bool
    materialized: bool
    bytes_read: int = 0
    bytes_written: int = 0
    peak_buffer_bytes: int = 0
    condensations: int = 0


@dataclass
class ExecutionLog:
    executor: str
    records: list = field(default_factory=list)

    def add(self, rec: SetRecord) -> None:
        self.records.append(rec)

    def __getitem__(self, name: str) -> SetRecord:
        for rec in self.records:
            if rec.name == name:
                return rec
        raise KeyError(name)

    @property
    def total_written(self) -> int:
        return sum(r.bytes_written for r in self.records)

    @property
    def total_read(self) -> int:
        return sum(r.bytes_read for r in self.records)

    def peak_by_layer(self) -> dict:
        peaks: dict = {}
        for r in self.records:
            peaks[r.layer] = max(peaks.get(r.layer, 0), r.peak_buffer_bytes)
        return peaks

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([r.layer, r.name, int(r.virtual), r.bytes_read, r.bytes_written, r.peak_buffer_bytes])
        return buf.getvalue()


class VirtualBuffer:
    """Working storage for one output block: alpha expanded slots plus one output slot."""

    def __init__(self, alpha: int):
        self.capacity = alpha + 1
        self.slots: dict = {}
        self.peak_bytes = 0

    def hold(self, key, values: np.ndarray) -> None:
        self.slots[key] = values
        if len(self.slots) > self.capacity:
            raise BufferOverflow(f"{len(self.slots)} blocks held, capacity {self.capacity}")
        used = sum(v.size for v in self.slots.values()) * ACC_BYTES
        self.peak_bytes = max(self.peak_bytes, used)

    def take(self, key) -> np.ndarray:
        return self.slots.pop(key)

    def clear(self) -> None:
        self.slots.clear()


def _check_inputs(net: NetworkDef, weights: WeightStore, inp: Tensor) -> None:
    want = (net.channels, net.height, net.width)
    if inp.shape != want or inp.bits != net.bits:
        raise L.ShapeError(f"input is {inp.shape}@{inp.bits}b, network expects {want}@{net.bits}b")
    params = net.conv_params()
    if len(weights) != len(params):
        raise L.ShapeError(f"{len(weights)} weight layers for {len(params)} conv layers")
    scheme = "binary1" if net.scheme == "w1a2" else "full32"
    for i, (lw, p) in enumerate(zip(weights.layers, params)):
        if lw.shape != (p.out_channels, p.in_channels, p.kernel, p.kernel) or lw.scheme != scheme:
            raise L.ShapeError(f"weight layer {i} is {lw.shape} {lw.scheme}, network needs {p} {scheme}")


def _input_step(bits: int) -> float:
    # 8-bit pixels map to [0, 1) in exact power-of-two steps
    return 2.0**-8 if bits == 8 else 1.0


def _set_names(net: NetworkDef):
    """Map layer index -> (virtual set name or None, stored set name)."""
    names = {}
    for s in net.feature_sets():
        virt, stored = names.get(s.layer, (None, None))
        if s.virtual:
            virt = s.name
        else:
            stored = s.name
        names[s.layer] = (virt, stored)
    return names


def _narrow(values: np.ndarray, bits: int) -> np.ndarray:
    return values.astype(np.float32) if bits == 32 else values.astype(np.uint8)


def run_reference(net: NetworkDef, weights: WeightStore, inp: Tensor):
    """Whole-set execution.  Returns (output, sets, log) where ``sets`` maps
    every set name, expanded ones included, to its Tensor."""
    _check_inputs(net, weights, inp)
    names = _set_names(net)
    log = ExecutionLog("reference")
    log.add(SetRecord(0, "input", False, True, bytes_written=inp.nbytes))
    sets = {"input": inp}
    cur, step = inp, _input_step(inp.bits)
    wi = 0
    binary = net.scheme == "w1a2"
    for i, layer, _, (c, h, w, bits) in net.walk():
        virt_name, name = names[i]
        if isinstance(layer, ConvLayer):
            lw = weights[wi]
            wi += 1
            x = L.dequantize_input(cur.to_array(), cur.bits, step, binary)
            kernel = lw.signs() if binary else lw.values
            acc = L.conv_accumulate(L._pad_hw(x, (layer.kernel - 1) // 2), kernel, binary)
            pre = L.conv_finish(acc, lw.scales, lw.bias, step, binary)
            expanded = Tensor.from_array(_narrow(layer.act(pre), bits), bits)
            read = cur.nbytes
            if layer.alpha > 1:
                sets[virt_name] = expanded
                log.add(SetRecord(i, virt_name, True, True, bytes_read=read, bytes_written=expanded.nbytes))
                pooled, _ = L.xpool(expanded.to_array(), layer.alpha, layer.pool)
                out = Tensor.from_array(pooled, bits)
                read = expanded.nbytes
            else:
                out = expanded
            if layer.act.quantized:
                step = layer.act.delta
            else:
                step = 1.0
        else:
            out = Tensor.from_array(L.spool(cur.to_array(), layer.stride), cur.bits)
            read = cur.nbytes
        sets[name] = out
        log.add(SetRecord(i, name, False, True, bytes_read=read, bytes_written=out.nbytes))
        cur = out
    return cur, sets, log


def _halo_region(t: Tensor, rect, pad: int, fill=0) -> tuple[np.ndarray, int]:
    """Region of every channel grown by ``pad`` pixels, ``fill`` outside the plane.

    Returns (values as (C, h + 2 pad, w + 2 pad), elements read per channel).
    """
    y, x, h, w = rect
    y0, x0 = max(y - pad, 0), max(x - pad, 0)
    y1, x1 = min(y + h + pad, t.height), min(x + w + pad, t.width)
    vals = extract_region(t, (y0, x0, y1 - y0, x1 - x0))
    if (y0, x0, y1, x1) != (y - pad, x - pad, y + h + pad, x + w + pad):
        grown = np.full((t.channels, h + 2 * pad, w + 2 * pad), fill, dtype=vals.dtype)
        oy, ox = y0 - (y - pad), x0 - (x - pad)
        grown[:, oy : oy + vals.shape[1], ox : ox + vals.shape[2]] = vals
        vals = grown
    return vals, (y1 - y0) * (x1 - x0)


def _stream_conv_channel(j, cur, layer, lw, plan, step, binary, out_bits):
    """All blocks of condensed output channel ``j``.  Returns (blocks, bits_read, peak, condensations)."""
    alpha, k = layer.alpha, layer.kernel
    pad = (k - 1) // 2
    group = slice(j * alpha, (j + 1) * alpha)
    kernel = (lw.signs() if binary else lw.values)[group]
    scales = lw.scales[group]
    bias = None if lw.bias is None else lw.bias[group]
    buf = VirtualBuffer(alpha)
    blocks, bits_read, condensations = [], 0, 0
    for rect in plan.blocks(cur.height, cur.width):
        y, x, h, w = rect
        buf.clear()
        # every input channel's block is fetched once per output channel, no caching
        regions, per_channel = _halo_region(cur, rect, pad)
        bits_read += per_channel * cur.channels * cur.bits
        # the input-channel loop runs inside the accumulate kernel, n = 0 .. N-1 in order
        acc = L.conv_accumulate(L.dequantize_input(regions, cur.bits, step, binary), kernel, binary)
        for a in range(alpha):
            buf.hold(a, acc[a])
        pre = L.conv_finish(acc, scales, bias, step, binary)
        act = layer.act(pre)
        for a in range(alpha):
            buf.hold(a, act[a])
        if alpha > 1:
            condensed, _ = L.xpool(act, alpha, layer.pool)
            condensations += 1
            result = condensed[0]
        else:
            result = act[0]
        buf.hold("out", result)
        for a in range(alpha):
            buf.take(a)
        blocks.append(Block(j, y, x, _narrow(buf.take("out"), out_bits)))
    return blocks, bits_read, buf.peak_bytes, condensations


def _stream_pool_channel(ch, cur, layer, plan):
    p = layer.params
    oh, ow = p.out_size(cur.height), p.out_size(cur.width)
    fill = L.pool_fill(np.float32 if cur.bits == 32 else np.int32)
    blocks, bits_read, peak = [], 0, 0
    for rect in plan.blocks(oh, ow):
        y, x, h, w = rect
        # window rows y*s .. (y+h-1)*s+1, padded past the plane edge with the minimum value
        in_rect = (y * p.stride, x * p.stride, (h - 1) * p.stride + 2, (w - 1) * p.stride + 2)
        vals, nread = _window_region(cur, ch, in_rect, fill)
        bits_read += nread * cur.bits
        pooled = L.pool_region(vals, p.stride, h, w)
        peak = max(peak, (vals.size + pooled.size) * ACC_BYTES)
        blocks.append(Block(ch, y, x, _narrow(pooled, cur.bits)))
    return blocks, bits_read, peak


def _window_region(t: Tensor, n: int, rect, fill):
    y, x, h, w = rect
    y1, x1 = min(y + h, t.height), min(x + w, t.width)
    blk = extract_block(t, n, (y, x, y1 - y, x1 - x))
    vals = blk.values
    if y1 - y < h or x1 - x < w:
        vals = np.pad(vals, ((0, h - (y1 - y)), (0, w - (x1 - x))), constant_values=fill)
    return vals, blk.values.size


def run_streaming(
    net: NetworkDef,
    weights: WeightStore,
    inp: Tensor,
    plan: Optional[BlockPlan] = None,
    workers: int = 1,
    stored: Optional[dict] = None,
):
    """Block-streaming execution.  Returns (output, log).

    ``workers`` models several convolution processing units working on
    different output channels; results are merged in channel order, so the
    output does not depend on it.  If ``stored`` is a dict it receives every
    stored (non-virtual) set.
    """
    plan = plan or BlockPlan()
    _check_inputs(net, weights, inp)
    names = _set_names(net)
    log = ExecutionLog("streaming")
    log.add(SetRecord(0, "input", False, True, bytes_written=inp.nbytes))
    if stored is not None:
        stored["input"] = inp
    cur, step = inp, _input_step(inp.bits)
    wi = 0
    binary = net.scheme == "w1a2"
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    mapper = pool.map if pool else map
    try:
        for i, layer, _, (c, h, w, bits) in net.walk():
            virt_name, name = names[i]
            writer = TensorWriter(h, w, c, bits)
            if isinstance(layer, ConvLayer):
                lw = weights[wi]
                wi += 1
                src = cur
                results = list(
                    mapper(lambda j: _stream_conv_channel(j, src, layer, lw, plan, step, binary, bits), range(c))
                )
                if virt_name is not None:
                    log.add(SetRecord(i, virt_name, True, False))
                step = layer.act.delta if layer.act.quantized else 1.0
                condensations = sum(r[3] for r in results)
            else:
                src = cur
                results = list(mapper(lambda ch: _stream_pool_channel(ch, src, layer, plan), range(c)))
                condensations = 0
            for blocks, *_ in results:
                for b in blocks:
                    writer.insert(b, lambda v, _bits: v)
            out = writer.freeze()
            read_bits = sum(r[1] for r in results)
            peak = max(r[2] for r in results)
            log.add(
                SetRecord(
                    i, name, False, True,
                    bytes_read=(read_bits + 7) // 8,
                    bytes_written=out.nbytes,
                    peak_buffer_bytes=peak,
                    condensations=condensations,
                )
            )
            if stored is not None:
                stored[name] = out
            cur = out
    finally:
        if pool:
            pool.shutdown()
    return cur, log


@dataclass
class Mismatch:
    set_name: str
    layer: int
    channel: int
    y: int
    x: int
    reference: float
    streaming: float

    def __str__(self):
        return (
            f"first difference in set {self.set_name} (layer {self.layer}) at channel {self.channel}, "
            f"pixel ({self.y}, {self.x}): reference {self.reference} vs streaming {self.streaming}"
        )


@dataclass
class CompareReport:
    reference_log: ExecutionLog
    streaming_log: ExecutionLog
    mismatch: Optional[Mismatch]
    output: Tensor

    @property
    def equal(self) -> bool:
        return self.mismatch is None

    @property
    def diff(self) -> list:
        return [] if self.mismatch is None else [self.mismatch]

    def saved_bytes(self) -> int:
        return self.reference_log.total_written - self.streaming_log.total_written

    def rows(self):
        """Side-by-side per-set rows: (layer, set, virtual, ref_written, stream_written, saved, stream_peak)."""
        for ref in self.reference_log.records:
            st = self.streaming_log[ref.name]
            yield (ref.layer, ref.name, ref.virtual, ref.bytes_written, st.bytes_written,
                   ref.bytes_written - st.bytes_written, st.peak_buffer_bytes)

    def to_text(self) -> str:
        head = f"{'layer':>5}  {'set':<14} {'virt':>4}  {'ref_written':>12}  {'stream_written':>14}  {'saved':>10}  {'peak_buf':>9}"
        lines = [head]
        for layer, name, virt, rw, sw, saved, peak in self.rows():
            lines.append(f"{layer:>5}  {name:<14} {int(virt):>4}  {rw:>12,}  {sw:>14,}  {saved:>10,}  {peak:>9,}")
        lines.append(f"saved bytes (virtual sets never stored): {self.saved_bytes():,}")
        lines.append("outputs bit-identical" if self.equal else str(self.mismatch))
        return "\n".join(lines)


def _first_difference(ref_sets: dict, stream_sets: dict, layer_of: dict) -> Optional[Mismatch]:
    for name, st in stream_sets.items():
        ref = ref_sets[name]
        if ref == st:
            continue
        a, b = ref.to_array(), st.to_array()
        if a.shape != b.shape:
            return Mismatch(name, layer_of[name], -1, -1, -1, float("nan"), float("nan"))
        neq = ~((a == b) | (np.isnan(a.astype(float)) & np.isnan(b.astype(float))))
        c, y, x = (int(v) for v in np.argwhere(neq)[0])
        return Mismatch(name, layer_of[name], c, y, x, float(a[c, y, x]), float(b[c, y, x]))
    return None


def compare_runs(
    net: NetworkDef,
    weights: WeightStore,
    inp: Tensor,
    plan: Optional[BlockPlan] = None,
    streaming_weights: Optional[WeightStore] = None,
    workers: int = 1,
) -> CompareReport:
    """Run both executors and locate the first differing stored set, channel and pixel.

    ``streaming_weights`` lets a test feed the streaming side different
    (e.g. corrupted) weights.
    """
    ref_out, ref_sets, ref_log = run_reference(net, weights, inp)
    stream_sets: dict = {}
    _, st_log = run_streaming(net, streaming_weights or weights, inp, plan, workers, stored=stream_sets)
    layer_of = {s.name: s.layer for s in net.feature_sets()}
    return CompareReport(ref_log, st_log, _first_difference(ref_sets, stream_sets, layer_of), ref_out)
