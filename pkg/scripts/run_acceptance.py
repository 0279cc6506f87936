"""Run the acceptance criteria and print one PASS/FAIL line per criterion.

    python3 scripts/run_acceptance.py            # all nine
    python3 scripts/run_acceptance.py 1 4 9      # a subset
"""
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]


def main(argv):
    target = str(ROOT / "tests" / "test_acceptance.py")
    args = [target, "-q", "-s", "-p", "no:cacheprovider"]
    if argv:
        args += ["-k", " or ".join(f"criterion_{n}_" for n in argv)]
    return pytest.main(args)


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
