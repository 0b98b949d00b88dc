import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)



# Acceptance criteria report. A test marked ``criterion(N)`` records its
# measurements with ``record_property("detail", ...)``; the verdict comes
# from the test outcome and is printed in the terminal summary.
_VERDICTS: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    # Parametrized criteria pass only if every case passes.
    verdict, details = _VERDICTS.get(marker.args[0], ("PASS", ""))
    if not report.passed:
        verdict = "FAIL"
    _VERDICTS[marker.args[0]] = (verdict, f"{details}; {detail}" if details else detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        verdict, detail = _VERDICTS[number]
        terminalreporter.write_line(f"AC{number:<2} {verdict}  {detail}")
