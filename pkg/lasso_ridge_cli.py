#!/usr/bin/env python3
"""
Lasso-Ridge launcher

Runs the lasso-ridge command line from a source checkout:

    python lasso_ridge_cli.py simulate --n 100 --p 200 --s 5 --sigma 0.5 --reps 20
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from lasso_ridge.cli import main  # noqa: E402

if __name__ == "__main__":
    main()
