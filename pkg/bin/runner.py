"""Script entry for running neureg from a checkout: ``python -m bin.runner <command> ...``.

Paths in config.yaml are relative to the repository root, so run from there.
"""
import sys

from neureg.cli import main

if __name__ == "__main__":
    sys.exit(main())
