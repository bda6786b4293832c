"""Regenerate the bundled CSV fixtures in tests/data from their scenario files."""

import sys
from pathlib import Path

from po2pls.cli import main

DATA = Path(__file__).resolve().parents[1] / "tests" / "data"

if __name__ == "__main__":
    for name in ("demo", "null"):
        code = main(["simulate", "--scenario-json", str(DATA / f"{name}_scenario.json"), "--out-prefix", str(DATA / name)])
        if code:
            sys.exit(code)
