"""Timing of the zipper and of Dyson ensemble + trace extraction; writes bench.csv
through the CLI so the output carries a manifest."""
import sys

from multisle.cli_io import main

if __name__ == "__main__":
    sys.exit(main(["bench", *sys.argv[1:]]))
