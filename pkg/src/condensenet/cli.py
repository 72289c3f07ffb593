"""Command-line front end: ``condensenet {run,compare,memory,traffic,perf,gradcheck}``.

Exit codes: 0 ok, 2 validation error, 3 numerical-check failure.

CSV schemas (``--format csv``):
  run/compare  layer,set,virtual,bytes_read,bytes_written,peak_buffer_bytes
  memory       layer,out,in,k,weight_bits,weight_bytes,scale_bias_bytes
  traffic      layer,set,virtual,bytes,stream_read_bytes
  perf         network,layer,macs
  gradcheck    case,alpha,op,param,rel_error
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis
from .executor import BufferOverflow, compare_runs, run_streaming
from .harness import gradcheck
from .layers import ShapeError, UnsupportedModeError
from .netdef import (NetworkDef, NetworkError, WeightFormatError, builtin_network, init_random_weights,
                     load_weights, parse_network)
from .quant import QuantError
from .tensor import BlockPlan, FormatError, Tensor, save_snapshot

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
GRAD_TOL = 1e-5
VALIDATION_ERRORS = (NetworkError, WeightFormatError, FormatError, ShapeError, UnsupportedModeError,
                     QuantError, ValueError, OSError)


class CliError(ValueError):
    pass


# inputs


def _parse_hw(text: str) -> tuple[int, int]:
    if "x" in text:
        h, w = text.split("x", 1)
        return int(h), int(w)
    return int(text), int(text)


def synthetic_input(spec: str, channels: int) -> np.ndarray:
    """``checker:N``, ``noise:N:SEED`` or ``ramp:N`` (N may be HxW) as uint8 (C, H, W)."""
    kind, _, rest = spec.partition(":")
    parts = rest.split(":")
    if not parts[0]:
        raise CliError(f"synthetic input {spec!r} needs a size, e.g. {kind}:64")
    h, w = _parse_hw(parts[0])
    if h < 1 or w < 1:
        raise CliError(f"bad input size in {spec!r}")
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "checker":
        plane = (((yy // 8) + (xx // 8)) % 2 * 255).astype(np.uint8)
        return np.stack([plane if c % 2 == 0 else 255 - plane for c in range(channels)])
    if kind == "ramp":
        plane = (yy + xx) * 255 // max(1, h + w - 2)
        return np.stack([np.roll(plane, 16 * c, axis=1) for c in range(channels)]).astype(np.uint8)
    if kind == "noise":
        seed = int(parts[1]) if len(parts) > 1 and parts[1] else 0
        return np.random.default_rng(seed).integers(0, 256, (channels, h, w), dtype=np.uint8)
    raise CliError(f"unknown input pattern {kind!r}; use checker:N, noise:N:SEED, ramp:N or a .pgm/.ppm path")


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6) with maxval <= 255, as uint8 (C, H, W)."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PNM header")
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: only binary P5/P6 images are supported, got {magic!r}")
    if not 0 < maxval <= 255:
        raise FormatError(f"{path}: maxval {maxval} is not 8-bit")
    c = 1 if magic == b"P5" else 3
    pixels = data[pos + 1 : pos + 1 + h * w * c]
    if len(pixels) != h * w * c:
        raise FormatError(f"{path}: expected {h * w * c} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1).copy()


def load_input(spec: str, channels: int) -> np.ndarray:
    if Path(spec).suffix.lower() in (".pgm", ".ppm", ".pnm"):
        arr = read_pnm(spec)
        if arr.shape[0] != channels:
            raise CliError(f"image {spec} has {arr.shape[0]} channels, network expects {channels}")
        return arr
    return synthetic_input(spec, channels)


# configuration


def resolve_network(name: str, scheme: str, size: Optional[tuple] = None) -> NetworkDef:
    """Builtin name (rebuilt at ``size``) or a ``.net`` file path."""
    if Path(name).suffix == ".net" or os.path.sep in name:
        return parse_network(Path(name).read_text())
    if size is None:
        return builtin_network(name, 512, scheme)
    h, w = size
    if h != w:
        raise CliError(f"builtin networks take square inputs, got {h}x{w}")
    return builtin_network(name, h, scheme)


@dataclass
class RunConfig:
    net: str
    input: str
    plan: BlockPlan
    scheme: str = "w1a2"
    seed: Optional[int] = None
    weights: Optional[str] = None
    out: Optional[str] = None
    log: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        if (self.seed is None) == (self.weights is None):
            raise CliError("give exactly one of --seed or --weights")

    def build(self):
        """(net, weights, input tensor) ready for the executors."""
        probe = resolve_network(self.net, self.scheme)
        arr = load_input(self.input, probe.channels)
        net = resolve_network(self.net, self.scheme, arr.shape[1:])
        if (net.height, net.width) != arr.shape[1:]:
            raise CliError(f"input is {arr.shape[1]}x{arr.shape[2]}, network expects {net.height}x{net.width}")
        if net.bits == 32:
            inp = Tensor.from_array(arr.astype(np.float32) / 255.0, 32)
        else:
            inp = Tensor.from_array(arr, 8)
        weights = init_random_weights(net, self.seed) if self.weights is None else load_weights(self.weights, net)
        return net, weights, inp

    def header(self) -> str:
        src = f"seed={self.seed}" if self.weights is None else f"weights={self.weights}"
        return f"# net={self.net} scheme={self.scheme} {src} input={self.input} block={self.plan} traversal={self.plan.traversal} workers={self.workers}"


def thread_count(requested: Optional[int]) -> int:
    """``--threads`` capped by CONDENSE_THREADS; defaults to the cap, or 1."""
    env = os.environ.get("CONDENSE_THREADS")
    cap = None
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise CliError(f"CONDENSE_THREADS must be an integer, got {env!r}") from None
    n = requested if requested is not None else (cap or 1)
    return max(1, min(n, cap) if cap else n)


def _run_config(args) -> RunConfig:
    return RunConfig(
        net=args.net, input=args.input, plan=BlockPlan.parse(args.block, args.traversal), scheme=args.scheme,
        seed=args.seed, weights=args.weights, out=getattr(args, "out", None), log=getattr(args, "log", None),
        workers=thread_count(args.threads),
    )


# commands


def cmd_run(cfg: RunConfig, fmt: str = "text") -> int:
    net, weights, inp = cfg.build()
    out, log = run_streaming(net, weights, inp, cfg.plan, cfg.workers)
    if cfg.out:
        save_snapshot(cfg.out, out)
    if cfg.log:
        Path(cfg.log).write_text(log.to_csv())
    digest = hashlib.sha256(out.to_bytes()).hexdigest()
    if fmt == "csv":
        sys.stdout.write(log.to_csv())
        return EXIT_OK
    print(cfg.header())
    print(f"output: {out.channels} x {out.height} x {out.width} @ {out.bits} bit")
    print(f"sha256: {digest}")
    print(f"stored bytes written: {log.total_written:,}   read: {log.total_read:,}")
    print(f"peak working buffer: {max(log.peak_by_layer().values(), default=0):,} B")
    return EXIT_OK


def cmd_compare(cfg: RunConfig, fmt: str = "text") -> int:
    net, weights, inp = cfg.build()
    report = compare_runs(net, weights, inp, cfg.plan, workers=cfg.workers)
    if cfg.out:
        save_snapshot(cfg.out, report.output)
    if fmt == "csv":
        sys.stdout.write(report.streaming_log.to_csv())
    else:
        print(cfg.header())
        print(report.to_text())
        print(f"sha256: {hashlib.sha256(report.output.to_bytes()).hexdigest()}")
    return EXIT_OK if report.equal else EXIT_NUMERIC


def cmd_memory(nets: list, wbits: int, scheme: str, size: int, fmt: str = "text") -> int:
    for name in nets:
        net = resolve_network(name, scheme, (size, size))
        rep = analysis.weight_memory(net, wbits)
        if fmt == "csv":
            sys.stdout.write(f"# net={name}\n" + rep.to_csv())
            continue
        key = name.lower().replace("_", "-")
        published = analysis.PUBLISHED_WEIGHT_KB.get(key) if (wbits == 1 and size == 512) else None
        print(f"# net={name} wbits={wbits} size={size}")
        print(rep.to_text(published))
        print()
    return EXIT_OK


def cmd_traffic(name: str, plan: BlockPlan, bits: int, scheme: str, size: int, fmt: str = "text",
                plot_data: bool = False) -> int:
    net = resolve_network(name, scheme, (size, size))
    rep = analysis.traffic_totals(net, plan, bits)
    if plot_data:
        sys.stdout.write(rep.plot_data())
    elif fmt == "csv":
        sys.stdout.write(rep.to_csv())
    else:
        print(f"# net={name} bits={bits} size={size} block={plan}")
        print(rep.to_text(show_published=name.startswith("condensation") and bits == 2 and size == 512))
    return EXIT_OK


def cmd_perf(net_a: str, net_b: str, rate: float, clock: float, scheme: str, size: int, fmt: str = "text") -> int:
    rep = analysis.mac_model(resolve_network(net_a, scheme, (size, size)), resolve_network(net_b, scheme, (size, size)),
                             rate, clock, names=(net_a, net_b))
    if fmt == "csv":
        sys.stdout.write(rep.to_csv())
    else:
        print(f"# nets={net_a},{net_b} size={size}")
        print(rep.to_text())
    return EXIT_OK


def cmd_gradcheck(seed: int, cases: int, fmt: str = "text") -> int:
    results = gradcheck(seed, cases)
    worst = max((r["max_error"] for r in results), default=0.0)
    if fmt == "csv":
        print("case,alpha,op,param,rel_error")
        for r in results:
            for p, e in r["errors"].items():
                print(f"{r['case']},{r['alpha']},{r['op']},{p},{e:.3e}")
    else:
        print(f"# gradcheck seed={seed} cases={cases} tolerance={GRAD_TOL:g}")
        for r in results:
            status = "ok" if r["max_error"] < GRAD_TOL else "FAIL"
            print(f"case {r['case']:>3}  alpha={r['alpha']} op={r['op']:<3} x={r['x_shape']} w1={r['w1_shape']}  "
                  f"max rel err {r['max_error']:.2e}  {status}")
        print(f"worst relative error {worst:.3e}")
    return EXIT_OK if worst < GRAD_TOL else EXIT_NUMERIC


# argument parsing


def _add_exec_args(p: argparse.ArgumentParser, with_outputs: bool) -> None:
    p.add_argument("--net", required=True, help="builtin (tiny-yolov2, condensation:A) or a .net file")
    p.add_argument("--scheme", choices=("w1a2", "full32"), default="w1a2", help="quantization for builtin nets")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--seed", type=int, help="random weights from this seed")
    src.add_argument("--weights", help=".cndw weight file")
    p.add_argument("--input", default="checker:64", help="checker:N | noise:N:SEED | ramp:N | image.pgm/.ppm")
    p.add_argument("--block", default="32", help="block extent: N, HxW or full")
    p.add_argument("--traversal", choices=("row", "col"), default="row")
    p.add_argument("--threads", type=int, help="output-channel workers (capped by CONDENSE_THREADS)")
    p.add_argument("--out", help="write the output tensor snapshot (CNFM) here")
    if with_outputs:
        p.add_argument("--log", help="write the execution log CSV here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="condensenet", description=__doc__.splitlines()[0])
    ap.add_argument("--format", choices=("text", "csv"), default="text")
    sub = ap.add_subparsers(dest="command", required=True)

    _add_exec_args(sub.add_parser("run", help="streaming inference"), with_outputs=True)
    _add_exec_args(sub.add_parser("compare", help="reference vs streaming, bit for bit"), with_outputs=False)

    p = sub.add_parser("memory", help="weight and feature-map memory")
    p.add_argument("--net", action="append", help="repeatable; default: the three builtin networks")
    p.add_argument("--wbits", type=int, choices=(1, 32), default=1)
    p.add_argument("--scheme", choices=("w1a2", "full32"), default="w1a2")
    p.add_argument("--size", type=int, default=512)

    p = sub.add_parser("traffic", help="feature-map traffic with and without virtual sets")
    p.add_argument("--net", default="condensation:2")
    p.add_argument("--bits", type=int, choices=(2, 8), default=2, help="activation bit width")
    p.add_argument("--block", default="32")
    p.add_argument("--scheme", choices=("w1a2", "full32"), default="w1a2")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--plot-data", action="store_true", help="per-layer CSV series for plotting")

    p = sub.add_parser("perf", help="MAC counts and ideal time model")
    p.add_argument("--net-a", default="tiny-yolov2")
    p.add_argument("--net-b", default="condensation:2")
    p.add_argument("--rate", type=float, default=analysis.PUBLISHED_MACS_PER_CYCLE, help="MACs per cycle")
    p.add_argument("--clock", type=float, default=analysis.PUBLISHED_CLOCK_HZ, help="clock in Hz")
    p.add_argument("--scheme", choices=("w1a2", "full32"), default="w1a2")
    p.add_argument("--size", type=int, default=512)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=20)
    return ap


def dispatch(args) -> int:
    fmt = args.format
    if args.command == "run":
        return cmd_run(_run_config(args), fmt)
    if args.command == "compare":
        return cmd_compare(_run_config(args), fmt)
    if args.command == "memory":
        return cmd_memory(args.net or ["tiny-yolov2", "condensation:2", "condensation:4"], args.wbits, args.scheme,
                          args.size, fmt)
    if args.command == "traffic":
        return cmd_traffic(args.net, BlockPlan.parse(args.block), args.bits, args.scheme, args.size, fmt,
                           args.plot_data)
    if args.command == "perf":
        return cmd_perf(args.net_a, args.net_b, args.rate, args.clock, args.scheme, args.size, fmt)
    return cmd_gradcheck(args.seed, args.cases, fmt)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    try:
        return dispatch(args)
    except BufferOverflow as e:
        print(f"error: {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"error: {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except VALIDATION_ERRORS as e:
        print(f"error: {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
