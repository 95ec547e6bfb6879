#!/usr/bin/env python3
"""
Command-line entry point for the desk-scale LegoFormer pipeline
"""
import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
