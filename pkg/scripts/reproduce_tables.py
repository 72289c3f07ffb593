"""Print the weight-memory, traffic and MAC tables for the builtin networks."""
import argparse
import sys

from condensenet.cli import main


def run(argv: list) -> None:
    print(f"$ condensenet {' '.join(argv)}")
    code = main(argv)
    if code:
        sys.exit(code)
    print()


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--format", choices=("text", "csv"), default="text")
    args = ap.parse_args()
    fmt = ["--format", args.format]
    run(fmt + ["memory"])
    for alpha in (1, 2, 4):
        run(fmt + ["traffic", "--net", f"condensation:{alpha}"])
    run(fmt + ["perf"])
