"""Trajectory-level vision-language reward learning on a synthetic desk world."""

import sys


def main() -> None:
    from decision_nce.cli import main as cli_main

    sys.exit(cli_main())
