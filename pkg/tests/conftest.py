import numpy as np
import pytest

_CRITERIA: dict = {}


@pytest.fixture
def record_criterion():
    """Collect one pass/fail line per acceptance criterion."""

    def _record(number: int, label: str, passed: bool, detail: str = ""):
        _CRITERIA[number] = (label, bool(passed), detail)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        label, passed, detail = _CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number} [{status}] {label}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def small_panel():
    """6 units x 7 periods, treatment in the last 3 periods."""
    from solodid import BalancedPanel

    gen = np.random.default_rng(42)
    y = gen.normal(size=(6, 7)) + 0.2 * np.arange(7)
    return BalancedPanel(
        [f"u{i}" for i in range(6)], np.arange(7), y, treatment_start=4
    )


@pytest.fixture
def counted_panel():
    """17 units x 10 periods with cell counts, for count-based methods."""
    from solodid import BalancedPanel

    gen = np.random.default_rng(9)
    n, t = 17, 10
    y = gen.normal(size=(n, t))
    counts = np.maximum(gen.poisson(500, size=(n, t)), 1)
    return BalancedPanel(
        [f"s{i:02d}" for i in range(n)], np.arange(t), y,
        treatment_start=6, cell_counts=counts,
    )
