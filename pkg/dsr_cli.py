#!/usr/bin/env python
"""
dsr - command line entry point

    dsr simulate --out seq/ --seed 3
    dsr register seq/ --mode dsr --out run/ --fuse
    dsr evaluate seq/ --poses run/poses.json --out eval/
    dsr fuse seq/ --poses run/poses.json --out fused/
    dsr benchmark --sequences 5 --out bench/
"""

import sys
from pathlib import Path

# Add project root to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from src.cli.commands import cli  # noqa: E402

__version__ = "0.1.0"


if __name__ == "__main__":
    cli()
