"""Run the acceptance suite and print one PASS/FAIL line per criterion."""
import argparse
import sys
from pathlib import Path

import pytest


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-k", help="only criteria whose test names match this expression")
    args = ap.parse_args()
    root = Path(__file__).resolve().parent.parent
    argv = [str(root / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider"]
    if args.k:
        argv += ["-k", args.k]
    return pytest.main(argv)


if __name__ == "__main__":
    sys.exit(main())
