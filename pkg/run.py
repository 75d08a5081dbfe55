#!/usr/bin/env python3
"""
Command-line entry point for the PS reconstruction toolkit.

Usage: python run.py <command> [flags]   (python run.py --help lists commands)
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from modules.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
