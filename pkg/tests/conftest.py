import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from po2pls.model import RankSpec  # noqa: E402
from _helpers import random_theta  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_ranks():
    return RankSpec(p=8, q=5, r=2, r_x=1, r_y=1)


@pytest.fixture
def small_theta(rng, small_ranks):
    return random_theta(rng, small_ranks)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
_ACCEPTANCE = []


@pytest.fixture
def report(capsys):
    def _report(number: int, name: str, ok: bool, detail: str):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
