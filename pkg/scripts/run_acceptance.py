"""Run the acceptance suite and print one PASS/FAIL line per criterion.

Takes about twenty minutes on one core; extra arguments go to pytest,
e.g. ``-k "criterion_2 or criterion_3"`` for the quick ones.
"""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    sys.exit(pytest.main([str(ROOT / "tests" / "test_acceptance.py"), "-v", *sys.argv[1:]]))
