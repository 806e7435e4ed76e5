import sys

import numpy as np
import pytest

from bbqram.program import MemoryTable
from bbqram.protocols import compile_protocol
from bbqram.topology import Scheme, TreeSpec

ALL_CONFIGS = [("nonparallel", 1, 0), ("parallel", 1, 0), ("hb-parallel", 2, 0), ("hybrid-parallel", 1, 1)]


def make(protocol: str, n: int, k: int, scheme: str = "qutrit", c: int = 1, m: int = 0, seed: int = 0):
    """(program, memory) with memory drawn from ``seed``."""
    prog = compile_protocol(protocol, TreeSpec(n, k, Scheme(scheme), c), m)
    mem = MemoryTable.random(1 << (n + m), k, np.random.default_rng(seed))
    return prog, mem


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "SUMMARY", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
