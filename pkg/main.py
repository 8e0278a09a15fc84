#!/usr/bin/env python3
"""
Main entry point for the layer-aggregation fake-image detection toolkit

    python main.py pipeline --config config/settings.json --out runs/desk
"""

import sys

from laf.cli import main

if __name__ == "__main__":
    sys.exit(main())
