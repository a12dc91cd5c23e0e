"""
Entry point for the low-dose CT reconstruction toolkit.

Usage: ``python -m src.main <command> [options]`` with one of simulate,
reconstruct, evaluate, verify or config. See ``src.cli`` for the commands.
"""

import sys
from typing import List, Optional

from src.cli import main as cli_main


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and return its exit code."""
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
