import numpy as np
import pytest

from featforge.expr import build_vocabulary, make_sequence, feature, op

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def vocab5():
    return build_vocabulary(5)


@pytest.fixture
def small_pairs(vocab5):
    """Six short (sequence, score) pairs over five features."""
    f, o = feature, op
    seqs = [
        make_sequence([f(0), f(1), o("add")]),
        make_sequence([f(2), o("log")], [f(0), f(3), o("multiply")]),
        make_sequence([f(4), o("square")]),
        make_sequence([f(1), f(2), o("subtract"), o("tanh")]),
        make_sequence([f(3), o("sin")], [f(4), o("cos")]),
        make_sequence([f(0), f(4), o("divide")]),
    ]
    scores = np.linspace(0.1, 0.9, len(seqs))
    return list(zip(seqs, scores))
