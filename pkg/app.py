"""
Stokes Optimal Control - Command-line entry point
Control-constrained optimal control of Stokes flow with CR/P0 and DG P1/P0 elements
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
