"""Closed-form memory, traffic and throughput accounting.

Rules used throughout:

* Weight memory counts raw filter bits only (out x in x K x K x w_bits);
  per-channel scale and bias storage is reported in its own column.
* Feature-map memory capacity is the largest single stored (non-virtual) set
  at the sizing bit width.
* Traffic counts each feature-map set once at its stored size.  "with
  virtual" omits the expanded sets that the streaming order never stores;
  "without virtual" includes them.  Savings are (without - with) / with.
* Stream reads assume no caching: every input block is fetched again for
  each output channel.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

from .netdef import ConvLayer, NetworkDef
from .tensor import BlockPlan

KB = 1024

# published reference figures, printed beside the computed totals
PUBLISHED_WEIGHT_KB = {"tiny-yolov2": 1924, "condensation:2": 1935, "condensation:4": 1959}
PUBLISHED_FEATURE_KB = 4096
PUBLISHED_TRAFFIC_KB = {"without_virtual": 9788, "with_virtual": 7740, "savings": 0.265}
PUBLISHED_TIMES_MS = {"tiny-yolov2": 95.0, "condensation:2": 124.0}
PUBLISHED_MACS_PER_CYCLE = 320
PUBLISHED_CLOCK_HZ = 400e6

CAPACITY_RULE = "capacity = largest single stored feature-map set at the sizing bit width"
SAVINGS_RULE = "savings = (without_virtual - with_virtual) / with_virtual"


def to_kb(nbytes: float) -> int:
    """Nearest whole KB, halves rounded up."""
    return math.floor(nbytes / KB + 0.5)


def savings_fraction(without_virtual: float, with_virtual: float) -> float:
    return (without_virtual - with_virtual) / with_virtual


def _emit_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class LayerWeightRow:
    name: str
    out: int
    inp: int
    kernel: int
    weight_bits: int
    overhead_bytes: int


@dataclass
class MemoryReport:
    w_bits: int
    layers: list
    feature_map_bytes: int = 0
    sizing_bits: int = 8

    @property
    def weight_bits(self) -> int:
        return sum(r.weight_bits for r in self.layers)

    @property
    def weight_bytes(self) -> float:
        return self.weight_bits / 8

    @property
    def weight_kb(self) -> int:
        return to_kb(self.weight_bytes)

    @property
    def overhead_bytes(self) -> int:
        return sum(r.overhead_bytes for r in self.layers)

    @property
    def feature_map_kb(self) -> int:
        return to_kb(self.feature_map_bytes)

    @property
    def total_kb(self) -> int:
        return self.weight_kb + self.feature_map_kb

    CSV_COLUMNS = ("layer", "out", "in", "k", "weight_bits", "weight_bytes", "scale_bias_bytes")

    def to_csv(self) -> str:
        rows = [(r.name, r.out, r.inp, r.kernel, r.weight_bits, r.weight_bits / 8, r.overhead_bytes) for r in self.layers]
        rows.append(("total", "", "", "", self.weight_bits, self.weight_bytes, self.overhead_bytes))
        return _emit_csv(self.CSV_COLUMNS, rows)

    def to_text(self, published_kb: Optional[int] = None) -> str:
        lines = [f"{'layer':<8} {'filters':>18} {'weight bits':>14} {'scale+bias B':>13}"]
        for r in self.layers:
            shape = f"{r.out}x{r.inp}x{r.kernel}x{r.kernel}"
            lines.append(f"{r.name:<8} {shape:>18} {r.weight_bits:>14,} {r.overhead_bytes:>13,}")
        lines.append(f"weight memory ({self.w_bits}-bit): {self.weight_bits:,} bits = {self.weight_kb:,} KB"
                     + (f"   [published: {published_kb:,} KB]" if published_kb is not None else ""))
        lines.append(f"scale/bias storage (reported separately): {self.overhead_bytes:,} B")
        lines.append(f"feature-map memory: {self.feature_map_kb:,} KB   ({CAPACITY_RULE}, {self.sizing_bits}-bit)"
                     + (f"   [published: {PUBLISHED_FEATURE_KB:,} KB]" if published_kb is not None else ""))
        lines.append(f"total: {self.total_kb:,} KB")
        return "\n".join(lines)


def weight_memory(net: NetworkDef, w_bits: int = 1, sizing_bits: int = 8) -> MemoryReport:
    if w_bits not in (1, 32):
        raise ValueError(f"w_bits must be 1 or 32, got {w_bits}")
    rows = []
    for i, p in enumerate(net.conv_params(), start=1):
        # binary layers carry a scale and a bias per output channel; full32 only the bias
        overhead = p.out_channels * 4 * (2 if w_bits == 1 else 1)
        rows.append(LayerWeightRow(f"conv{i}", p.out_channels, p.in_channels, p.kernel,
                                   p.out_channels * p.in_channels * p.kernel**2 * w_bits, overhead))
    return MemoryReport(w_bits, rows, feature_memory_capacity(net, sizing_bits), sizing_bits)


def feature_memory_capacity(net: NetworkDef, sizing_bits: int = 8) -> int:
    """Bytes needed for the largest stored set; expanded (virtual) sets never count."""
    if sizing_bits not in (2, 8):
        raise ValueError(f"sizing_bits must be 2 or 8, got {sizing_bits}")
    return max(s.nbytes(sizing_bits) for s in net.feature_sets() if not s.virtual)


@dataclass
class TrafficRow:
    name: str
    layer: int
    virtual: bool
    nbytes: int
    stream_read_bytes: int = 0


@dataclass
class TrafficReport:
    """``total_with_virtual`` is what the streaming order stores (expanded sets
    skipped); ``total_without_virtual`` stores every set."""

    act_bits: int
    plan: BlockPlan
    rows: list = field(default_factory=list)

    @property
    def total_with_virtual(self) -> int:
        return sum(r.nbytes for r in self.rows if not r.virtual)

    @property
    def total_without_virtual(self) -> int:
        return sum(r.nbytes for r in self.rows)

    @property
    def excluded_bytes(self) -> int:
        return self.total_without_virtual - self.total_with_virtual

    @property
    def savings_fraction(self) -> float:
        return savings_fraction(self.total_without_virtual, self.total_with_virtual)

    @property
    def stream_read_bytes(self) -> int:
        return sum(r.stream_read_bytes for r in self.rows)

    CSV_COLUMNS = ("layer", "set", "virtual", "bytes", "stream_read_bytes")

    def to_csv(self) -> str:
        rows = [(r.layer, r.name, int(r.virtual), r.nbytes, r.stream_read_bytes) for r in self.rows]
        return _emit_csv(self.CSV_COLUMNS, rows)

    def plot_data(self) -> str:
        """Per-layer (stored, required) byte series, one row per layer."""
        per_layer: dict = {}
        for r in self.rows:
            stored, required = per_layer.get(r.layer, (0, 0))
            per_layer[r.layer] = (stored + (0 if r.virtual else r.nbytes), required + r.nbytes)
        return _emit_csv(("layer", "bytes_with_virtual", "bytes_without_virtual"),
                         [(k, *v) for k, v in sorted(per_layer.items())])

    def to_text(self, show_published: bool = False) -> str:
        lines = [f"{'layer':>5}  {'set':<14} {'virt':>4} {'bytes':>12} {'stream reads':>14}"]
        for r in self.rows:
            lines.append(f"{r.layer:>5}  {r.name:<14} {int(r.virtual):>4} {r.nbytes:>12,} {r.stream_read_bytes:>14,}")
        lines.append(f"activations at {self.act_bits} bits, block plan {self.plan}")
        lines.append(f"without virtual feature maps: {self.total_without_virtual:,} B ({self.total_without_virtual / KB:,.3f} KB)")
        lines.append(f"with virtual feature maps:    {self.total_with_virtual:,} B ({self.total_with_virtual / KB:,.3f} KB)")
        lines.append(f"excluded (virtual) sets:      {self.excluded_bytes:,} B ({self.excluded_bytes / KB:,.3f} KB)")
        lines.append(f"savings_fraction: {self.savings_fraction:.4f}   ({SAVINGS_RULE}; definition inferred from the published pair)")
        lines.append(f"stream reads (no input caching across output channels): {self.stream_read_bytes:,} B")
        if show_published:
            p = PUBLISHED_TRAFFIC_KB
            lines.append(
                f"published figures (accounting unspecified, not reproduced): without {p['without_virtual']:,} KB, "
                f"with {p['with_virtual']:,} KB, savings {savings_fraction(p['without_virtual'], p['with_virtual']):.4f} "
                f"(quoted {p['savings']:.1%})"
            )
        return "\n".join(lines)


def _clipped_area(start: int, extent: int, pad_lo: int, pad_hi: int, limit: int) -> int:
    return min(start + extent + pad_hi, limit) - max(start - pad_lo, 0)


def stream_reads(net: NetworkDef, plan: BlockPlan, act_bits: Optional[int] = None) -> dict:
    """Bytes each layer reads in the streaming order, keyed by the stored set it produces.

    ``act_bits`` overrides the stored width of every set except the network input.
    """
    reads = {}
    stored = [s for s in net.feature_sets() if not s.virtual]
    for (_, layer, (c, h, w, _), (oc, oh, ow, _)), src, dst in zip(net.walk(), stored, stored[1:]):
        bits = src.bits if src.layer == 0 or act_bits is None else act_bits
        total = 0
        if isinstance(layer, ConvLayer):
            pad = (layer.kernel - 1) // 2
            for y, x, bh, bw in plan.blocks(h, w):
                total += _clipped_area(y, bh, pad, pad, h) * _clipped_area(x, bw, pad, pad, w)
            total *= oc * c
        else:
            s = layer.stride
            for y, x, bh, bw in plan.blocks(oh, ow):
                total += (min(y * s + (bh - 1) * s + 2, h) - y * s) * (min(x * s + (bw - 1) * s + 2, w) - x * s)
            total *= c
        reads[dst.name] = (total * bits + 7) // 8
    return reads


def traffic_totals(net: NetworkDef, plan: Optional[BlockPlan] = None, act_bits: int = 2) -> TrafficReport:
    if act_bits not in (2, 8):
        raise ValueError(f"act_bits must be 2 or 8, got {act_bits}")
    plan = plan or BlockPlan()
    reads = stream_reads(net, plan, act_bits)
    report = TrafficReport(act_bits, plan)
    for s in net.feature_sets():
        bits = s.bits if s.layer == 0 else act_bits
        report.rows.append(TrafficRow(s.name, s.layer, s.virtual, s.nbytes(bits), reads.get(s.name, 0)))
    return report


@dataclass
class PerfReport:
    names: tuple
    layer_macs: tuple  # per network: list of (layer name, MACs)
    macs_per_cycle: float
    clock_hz: float

    @property
    def totals(self) -> tuple:
        return tuple(sum(m for _, m in rows) for rows in self.layer_macs)

    @property
    def cycles(self) -> tuple:
        return tuple(math.ceil(t / self.macs_per_cycle) for t in self.totals)

    @property
    def ideal_seconds(self) -> tuple:
        return tuple(t / (self.macs_per_cycle * self.clock_hz) for t in self.totals)

    @property
    def mac_ratio(self) -> float:
        a, b = self.totals
        return b / a

    @property
    def published_time_ratio(self) -> Optional[float]:
        a, b = (PUBLISHED_TIMES_MS.get(n) for n in self.names)
        return None if a is None or b is None else b / a

    CSV_COLUMNS = ("network", "layer", "macs")

    def to_csv(self) -> str:
        rows = []
        for name, layers in zip(self.names, self.layer_macs):
            rows += [(name, layer, m) for layer, m in layers]
            rows.append((name, "total", sum(m for _, m in layers)))
        return _emit_csv(self.CSV_COLUMNS, rows)

    def to_text(self) -> str:
        a, b = self.names
        lines = [f"{'layer':<8} {a:>18} {b:>18}"]
        for (la, ma), (_, mb) in zip(*self.layer_macs):
            lines.append(f"{la:<8} {ma:>18,} {mb:>18,}")
        ta, tb = self.totals
        lines.append(f"{'total':<8} {ta:>18,} {tb:>18,}")
        lines.append(f"MAC ratio {b}/{a}: {self.mac_ratio:.4f}")
        lines.append(f"model: {self.macs_per_cycle:g} MACs/cycle at {self.clock_hz / 1e6:g} MHz, every MAC slot busy")
        for name, sec, cyc in zip(self.names, self.ideal_seconds, self.cycles):
            published = PUBLISHED_TIMES_MS.get(name)
            note = f"   [published measurement, not reproduced: {published:g} ms]" if published is not None else ""
            lines.append(f"  {name:<16} ideal {sec * 1e3:8.2f} ms ({cyc:,} cycles){note}")
        ratio = self.published_time_ratio
        if ratio is not None:
            lines.append(f"time ratio: modeled ideal {self.mac_ratio:.4f} vs published {ratio:.4f}")
        return "\n".join(lines)


def conv_macs(net: NetworkDef) -> list:
    """(layer name, H_out * W_out * expanded C_out * C_in * K^2) for every conv layer."""
    rows = []
    params = iter(net.conv_params())
    nconv = 0
    for _, layer, (c, h, w, _), _ in net.walk():
        if isinstance(layer, ConvLayer):
            nconv += 1
            p = next(params)
            rows.append((f"conv{nconv}", h * w * p.out_channels * c * p.kernel**2))
    return rows


def mac_model(net_a: NetworkDef, net_b: NetworkDef, macs_per_cycle: float = PUBLISHED_MACS_PER_CYCLE,
              clock_hz: float = PUBLISHED_CLOCK_HZ, names: tuple = ("A", "B")) -> PerfReport:
    if macs_per_cycle <= 0 or clock_hz <= 0:
        raise ValueError("rates must be positive")
    return PerfReport(tuple(names), (conv_macs(net_a), conv_macs(net_b)), macs_per_cycle, clock_hz)

