import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA = {}
_TITLES = {
    1: "sinkhorn cost vs exact LP",
    2: "partial OT feasibility",
    3: "partial OT reduces to OT at frac=1",
    4: "partial OT cost vs slack LP",
    5: "analytic gradients vs finite differences",
    6: "rank AUC vs pairwise oracle",
    7: "desk-scale end-to-end run",
    8: "prompt-variant ablation ordering",
    9: "vision-adaptation ordering",
    10: "determinism of params and report",
}


@pytest.fixture
def criterion():
    """Record ``(number, ok, detail)`` for the acceptance summary."""

    def record(number, ok, detail=""):
        _CRITERIA[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in _TITLES.items():
        if number in _CRITERIA:
            ok, detail = _CRITERIA[number]
            status = "PASS" if ok else "FAIL"
        else:
            status, detail = "NOT RUN", ""
        line = f"criterion {number:2d} [{status}] {title}"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
