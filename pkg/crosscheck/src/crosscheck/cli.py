"""Run the parity suite over a dump directory: ``crosscheck --dump DIR``."""

from __future__ import annotations

import argparse
import sys

from .parity import UsageError, run_parity_suite


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="crosscheck", description=__doc__)
    parser.add_argument("--dump", required=True, help="dump directory from the producer CLI")
    args = parser.parse_args(argv)
    try:
        report = run_parity_suite(args.dump)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    print(report.render())
    return 0 if report.passed else 2


if __name__ == "__main__":
    sys.exit(main())
