#!/usr/bin/env python3
"""CLI entrypoint: time-series domain adaptation runs (see `python main.py --help`)."""
import sys

from glada.cli import cli_main


if __name__ == "__main__":
    sys.exit(cli_main())
