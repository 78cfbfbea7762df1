#!/usr/bin/env python3
"""
Entry point for running kgfm as a module
"""

import sys

from . import main

if __name__ == "__main__":
    sys.exit(main())
