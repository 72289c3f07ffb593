"""Sweep block sizes on a condensation network and report buffer peaks, stream reads and wall time."""
import argparse
import time

import numpy as np

from condensenet import analysis
from condensenet.executor import run_reference, run_streaming
from condensenet.netdef import build_condensation, init_random_weights
from condensenet.tensor import BlockPlan, Tensor


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--alpha", type=int, default=2, choices=(1, 2, 4))
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--scheme", choices=("w1a2", "full32"), default="w1a2")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--blocks", default="4,8,16,32,full")
    args = ap.parse_args()

    net = build_condensation(args.alpha, args.size, args.scheme)
    weights = init_random_weights(net, args.seed)
    rng = np.random.default_rng(args.seed)
    x = Tensor.from_array(rng.integers(0, 256, (net.channels, net.height, net.width)), 8)
    ref, _, _ = run_reference(net, weights, x)
    act_bits = 2 if args.scheme == "w1a2" else None

    print("block,conv1_peak_bytes,max_peak_bytes,stream_read_bytes,bytes_written,seconds,identical")
    for spec in args.blocks.split(","):
        plan = BlockPlan.parse(spec)
        t0 = time.perf_counter()
        out, log = run_streaming(net, weights, x, plan)
        dt = time.perf_counter() - t0
        reads = sum(analysis.stream_reads(net, plan, act_bits).values())
        peaks = log.peak_by_layer()
        print(f"{plan},{peaks[1]},{max(peaks.values())},{reads},{log.total_written},{dt:.3f},{int(out == ref)}")


if __name__ == "__main__":
    main()
