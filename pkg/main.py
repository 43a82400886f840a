"""Main entry point for the expert-teacher-student anomaly detector."""

import sys

from core.cli import main

if __name__ == "__main__":
    sys.exit(main())
